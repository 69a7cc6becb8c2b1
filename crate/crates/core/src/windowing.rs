//! Random sample boxes and the sliding windows that keep inputs, generated
//! canvases and ground truth pixel-aligned.
//!
//! Coordinates are `(y, x)` row/column pairs throughout.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{crop_tensor, place_tensor, Graph, Real, Tensor, Var};

/// An axis-aligned window inside a canvas.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleWindow {
    pub origin: (i64, i64),
    pub size: (usize, usize),
    pub canvas_size: (usize, usize),
}

impl SampleWindow {
    /// Checked constructor; the window must lie inside the canvas.
    pub fn new(origin: (i64, i64), size: (usize, usize), canvas_size: (usize, usize)) -> Result<Self> {
        let w = SampleWindow {
            origin,
            size,
            canvas_size,
        };
        w.check()?;
        Ok(w)
    }

    /// The window covering a whole canvas.
    pub fn full(canvas_size: (usize, usize)) -> Self {
        SampleWindow {
            origin: (0, 0),
            size: canvas_size,
            canvas_size,
        }
    }

    fn check(&self) -> Result<()> {
        let fits = |o: i64, s: usize, c: usize| o >= 0 && o as usize + s <= c;
        if fits(self.origin.0, self.size.0, self.canvas_size.0) && fits(self.origin.1, self.size.1, self.canvas_size.1) {
            Ok(())
        } else {
            Err(Error::WindowOutOfBounds {
                origin: self.origin,
                size: self.size,
                canvas: self.canvas_size,
            })
        }
    }

    /// Origin as unsigned offsets; only valid windows are ever constructed
    /// through [`SampleWindow::new`], but public fields can be edited.
    pub fn offsets(&self) -> Result<(usize, usize)> {
        self.check()?;
        Ok((self.origin.0 as usize, self.origin.1 as usize))
    }

    pub fn shifted(&self, dy: i64, dx: i64) -> Result<Self> {
        SampleWindow::new((self.origin.0 + dy, self.origin.1 + dx), self.size, self.canvas_size)
    }
}

/// Draws a box with a uniform integer origin such that it fits.
pub fn draw_sample_box(rng: &mut impl Rng, full_size: (usize, usize), box_size: (usize, usize)) -> Result<SampleWindow> {
    if box_size.0 > full_size.0 || box_size.1 > full_size.1 || box_size.0 == 0 || box_size.1 == 0 {
        return Err(Error::BoxTooLarge { box_size, full_size });
    }
    let oy = rng.random_range(0..=full_size.0 - box_size.0);
    let ox = rng.random_range(0..=full_size.1 - box_size.1);
    Ok(SampleWindow {
        origin: (oy as i64, ox as i64),
        size: box_size,
        canvas_size: full_size,
    })
}

/// Zero-pads a crop `[N, C, h, w]` back into its window's full canvas at the
/// window origin. Returns the padded tensor and the placement offset.
pub fn pad_to_training_size<T: Real>(cropped: &Tensor<T>, window: &SampleWindow) -> Result<(Tensor<T>, (usize, usize))> {
    let (_, _, h, w) = cropped.dims4();
    if (h, w) != window.size {
        return Err(Error::ShapeMismatch {
            name: "padded crop".into(),
            expected: vec![window.size.0, window.size.1],
            found: vec![h, w],
        });
    }
    let (oy, ox) = window.offsets()?;
    Ok((place_tensor(cropped, window.canvas_size.0, window.canvas_size.1, oy, ox), (oy, ox)))
}

fn check_canvas(shape: &[usize], window: &SampleWindow) -> Result<(usize, usize)> {
    if shape.len() != 4 || (shape[2], shape[3]) != window.canvas_size {
        return Err(Error::ShapeMismatch {
            name: "windowed canvas".into(),
            expected: vec![window.canvas_size.0, window.canvas_size.1],
            found: shape.get(2..).unwrap_or(&[]).to_vec(),
        });
    }
    window.offsets()
}

/// Exact sub-array `out[i, j] = canvas[i + oy, j + ox]`.
pub fn crop_window<T: Real>(canvas: &Tensor<T>, window: &SampleWindow) -> Result<Tensor<T>> {
    let (oy, ox) = check_canvas(canvas.shape(), window)?;
    Ok(crop_tensor(canvas, oy, ox, window.size.0, window.size.1))
}

/// [`crop_window`] on the tape.
pub fn crop_window_var<T: Real>(g: &mut Graph<T>, canvas: Var, window: &SampleWindow) -> Result<Var> {
    let (oy, ox) = check_canvas(g.shape(canvas), window)?;
    Ok(g.crop(canvas, oy, ox, window.size.0, window.size.1))
}

/// Where a canvas sits relative to image space: image pixel `p` lands on
/// canvas pixel `floor(p · num / den) + margin`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CanvasSpec {
    pub size: (usize, usize),
    pub margin: (usize, usize),
    pub num: usize,
    pub den: usize,
}

impl CanvasSpec {
    /// A canvas sharing image space exactly.
    pub fn identity(size: (usize, usize)) -> Self {
        CanvasSpec {
            size,
            margin: (0, 0),
            num: 1,
            den: 1,
        }
    }

    /// A canvas at image resolution with `margin` extra pixels on each side.
    pub fn with_margin(image_size: (usize, usize), margin: usize) -> Self {
        CanvasSpec {
            size: (image_size.0 + 2 * margin, image_size.1 + 2 * margin),
            margin: (margin, margin),
            num: 1,
            den: 1,
        }
    }
}

/// Maps an image-space sample box into each canvas's frame.
pub fn align_windows(sample_box: &SampleWindow, specs: &[CanvasSpec]) -> Result<Vec<SampleWindow>> {
    specs
        .iter()
        .map(|s| {
            let (num, den) = (s.num as i64, s.den as i64);
            let map = |o: i64, m: usize| (o * num).div_euclid(den) + m as i64;
            let origin = (map(sample_box.origin.0, s.margin.0), map(sample_box.origin.1, s.margin.1));
            let size = (sample_box.size.0 * s.num / s.den, sample_box.size.1 * s.num / s.den);
            SampleWindow::new(origin, size, s.size)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_size_box_is_at_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(draw_sample_box(&mut rng, (64, 64), (64, 64)).unwrap().origin, (0, 0));
        assert!(draw_sample_box(&mut rng, (64, 64), (65, 8)).is_err());
    }

    #[test]
    fn boxes_are_reproducible() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| draw_sample_box(&mut rng, (128, 128), (64, 64)).unwrap().origin).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        assert_ne!(draw(5), draw(6));
    }

    #[test]
    fn origins_are_uniform() {
        // 10,000 draws of a 256 box on a 512 canvas; 257 possible origins per
        // axis grouped into 8 bins, each within 3σ of its expected count.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let mut bins = [[0usize; 8]; 2];
        for _ in 0..n {
            let w = draw_sample_box(&mut rng, (512, 512), (256, 256)).unwrap();
            bins[0][(w.origin.0 as usize * 8) / 257] += 1;
            bins[1][(w.origin.1 as usize * 8) / 257] += 1;
        }
        for axis in bins {
            for (b, &count) in axis.iter().enumerate() {
                let width = (0..257).filter(|o| o * 8 / 257 == b).count() as f64;
                let p = width / 257.0;
                let expected = n as f64 * p;
                let sigma = (n as f64 * p * (1.0 - p)).sqrt();
                assert!((count as f64 - expected).abs() <= 3.0 * sigma, "bin {b}: {count} vs {expected}");
            }
        }
    }

    #[test]
    fn padding_round_trips() {
        let crop = Tensor::from_fn(&[1, 2, 4, 4], |i| i as f32 + 1.0);
        let at_zero = SampleWindow::new((0, 0), (4, 4), (8, 8)).unwrap();
        let (padded, off) = pad_to_training_size(&crop, &at_zero).unwrap();
        assert_eq!(off, (0, 0));
        assert_eq!(crop_window(&padded, &at_zero).unwrap(), crop);
        let plane = &padded.data()[..64];
        for (i, &v) in plane.iter().enumerate() {
            assert_eq!(v != 0.0, i / 8 < 4 && i % 8 < 4);
        }
        let moved = at_zero.shifted(2, 3).unwrap();
        let (other, _) = pad_to_training_size(&crop, &moved).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(padded.data()[y * 8 + x], other.data()[(y + 2) * 8 + x + 3]);
            }
        }
        let small = SampleWindow::new((0, 0), (4, 4), (3, 3));
        assert!(small.is_err());
    }

    #[test]
    fn crop_window_cases() {
        let canvas = Tensor::from_fn(&[1, 1, 10, 10], |i| i as f32);
        assert_eq!(crop_window(&canvas, &SampleWindow::full((10, 10))).unwrap(), canvas);
        let a = crop_window(&canvas, &SampleWindow::new((0, 0), (4, 4), (10, 10)).unwrap()).unwrap();
        let b = crop_window(&canvas, &SampleWindow::new((3, 5), (4, 4), (10, 10)).unwrap()).unwrap();
        assert_eq!(b.data()[0], canvas.data()[3 * 10 + 5]);
        assert_eq!(a.data()[0], 0.0);
        let bad = SampleWindow {
            origin: (-1, 0),
            size: (4, 4),
            canvas_size: (10, 10),
        };
        assert!(matches!(crop_window(&canvas, &bad), Err(Error::WindowOutOfBounds { .. })));
    }

    #[test]
    fn align_windows_rules() {
        let image = (128, 128);
        let specs = [
            CanvasSpec::identity(image),
            CanvasSpec::with_margin(image, 16),
            CanvasSpec {
                size: (64, 64),
                margin: (0, 0),
                num: 1,
                den: 2,
            },
        ];
        let centered = SampleWindow::new((32, 32), (64, 64), image).unwrap();
        let ws = align_windows(&centered, &specs).unwrap();
        for w in &ws {
            let free = (w.canvas_size.0 - w.size.0) as i64;
            assert_eq!(w.origin, (free / 2, free / 2));
        }
        let moved = align_windows(&centered.shifted(3, -5).unwrap(), &specs[..2]).unwrap();
        for (a, b) in ws.iter().zip(&moved) {
            assert_eq!((b.origin.0 - a.origin.0, b.origin.1 - a.origin.1), (3, -5));
        }
        let odd = SampleWindow::new((7, 9), (64, 64), image).unwrap();
        assert_eq!(align_windows(&odd, &specs[2..]).unwrap()[0].origin, (3, 4));
        let too_big = [CanvasSpec::identity((32, 32))];
        assert!(align_windows(&centered, &too_big).is_err());
    }
}
