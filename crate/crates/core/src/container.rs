//! Named-array container: a directory holding `manifest.json` plus one raw
//! little-endian, row-major binary file per array.
//!
//! ```json
//! { "arrays": { "mean_shape": { "shape": [502, 3], "dtype": "float32", "file": "mean_shape.bin" } } }
//! ```
//!
//! Morphable models, checkpoints and the rendering cache all use this layout.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    I32(Vec<i32>),
}

impl ArrayData {
    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F32(_) => "float32",
            ArrayData::I32(_) => "int32",
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::I32(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    shape: Vec<usize>,
    dtype: String,
    file: String,
}

#[derive(Serialize, Deserialize, Default)]
struct Manifest {
    arrays: BTreeMap<String, Entry>,
}

/// In-memory set of named arrays, read from or written to a directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    arrays: BTreeMap<String, Array>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn insert_f32(&mut self, name: &str, shape: &[usize], data: Vec<f32>) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "array `{name}` shape/data mismatch");
        self.arrays.insert(
            name.to_string(),
            Array {
                shape: shape.to_vec(),
                data: ArrayData::F32(data),
            },
        );
    }

    pub fn insert_i32(&mut self, name: &str, shape: &[usize], data: Vec<i32>) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "array `{name}` shape/data mismatch");
        self.arrays.insert(
            name.to_string(),
            Array {
                shape: shape.to_vec(),
                data: ArrayData::I32(data),
            },
        );
    }

    /// Stores a tensor as float32.
    pub fn insert_tensor<T: Real>(&mut self, name: &str, t: &Tensor<T>) {
        let data = t.data().iter().map(|x| x.to_f32().unwrap_or(f32::NAN)).collect();
        self.insert_f32(name, t.shape(), data);
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.arrays.get(name).ok_or_else(|| Error::MissingArray(name.to_string()))
    }

    pub fn f32(&self, name: &str) -> Result<(&[usize], &[f32])> {
        let a = self.get(name)?;
        match &a.data {
            ArrayData::F32(v) => Ok((&a.shape, v)),
            other => Err(Error::Dtype {
                name: name.to_string(),
                dtype: other.dtype().to_string(),
            }),
        }
    }

    pub fn i32(&self, name: &str) -> Result<(&[usize], &[i32])> {
        let a = self.get(name)?;
        match &a.data {
            ArrayData::I32(v) => Ok((&a.shape, v)),
            other => Err(Error::Dtype {
                name: name.to_string(),
                dtype: other.dtype().to_string(),
            }),
        }
    }

    pub fn tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        let (shape, data) = self.f32(name)?;
        Ok(Tensor::from_vec(shape, data.iter().map(|&x| T::of(x as f64)).collect()))
    }

    /// Like [`Container::tensor`] but also checks the shape.
    pub fn tensor_shaped<T: Real>(&self, name: &str, expected: &[usize]) -> Result<Tensor<T>> {
        let t = self.tensor(name)?;
        if t.shape() != expected {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: expected.to_vec(),
                found: t.shape().to_vec(),
            });
        }
        Ok(t)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format("manifest", &manifest_path, e))?;
        let mut arrays = BTreeMap::new();
        for (name, entry) in manifest.arrays {
            let path = dir.join(&entry.file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let expected: usize = entry.shape.iter().product();
            let found_len = bytes.len() / 4;
            if bytes.len() % 4 != 0 || found_len != expected {
                let mut found = entry.shape.clone();
                // report the trailing extent the file actually supports
                let lead: usize = entry.shape[..entry.shape.len().saturating_sub(1)].iter().product();
                if let Some(last) = found.last_mut() {
                    *last = found_len.checked_div(lead).unwrap_or(found_len);
                }
                return Err(Error::ShapeMismatch {
                    name,
                    expected: entry.shape,
                    found,
                });
            }
            let words = bytes.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
            let data = match entry.dtype.as_str() {
                "float32" => ArrayData::F32(words.map(f32::from_le_bytes).collect()),
                "int32" => ArrayData::I32(words.map(i32::from_le_bytes).collect()),
                other => {
                    return Err(Error::Dtype {
                        name,
                        dtype: other.to_string(),
                    })
                }
            };
            arrays.insert(
                name,
                Array {
                    shape: entry.shape,
                    data,
                },
            );
        }
        Ok(Container { arrays })
    }

    /// Writes the container into `dir` (created if needed). Array files are
    /// written before the manifest, each via a temporary file and rename.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = Manifest::default();
        for (name, array) in &self.arrays {
            let file = format!("{name}.bin");
            let mut bytes = Vec::with_capacity(array.data.len() * 4);
            match &array.data {
                ArrayData::F32(v) => v.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
                ArrayData::I32(v) => v.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
            }
            write_atomic(&dir.join(&file), &bytes)?;
            manifest.arrays.insert(
                name.clone(),
                Entry {
                    shape: array.shape.clone(),
                    dtype: array.data.dtype().to_string(),
                    file,
                },
            );
        }
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_atomic(&dir.join(MANIFEST), text.as_bytes())
    }
}

/// Writes `bytes` to a sibling temporary file, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_sibling(path);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn tmp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}
