//! `ImageTensor`: the fixed-geometry RGB image type used everywhere.
//!
//! Images are stored channel-first `(3, H, W)` as `f64` in `[0,1]`. PNG
//! files on disk are 8-bit; loading divides by 255, saving rounds back.

use std::path::Path;

use image::{ImageBuffer, Rgb};
use ndarray::Array3;

use crate::error::{Error, Result};

/// Height/width of every image in one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ImageGeometry {
    pub height: usize,
    pub width: usize,
}

impl ImageGeometry {
    pub const fn new(height: usize, width: usize) -> Self {
        ImageGeometry { height, width }
    }
}

impl std::fmt::Display for ImageGeometry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

/// RGB image, channel-first `(3, H, W)`, values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    /// Wraps raw data, validating shape, finiteness, and the `[0,1]` range.
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, _, _) = data.dim();
        if c != Self::CHANNELS {
            return Err(Error::shape("ImageTensor::new", "3 channels", c));
        }
        if !data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::Parameter {
                name: "image values",
                reason: "must be finite and within [0,1]".into(),
            });
        }
        Ok(ImageTensor { data })
    }

    /// All-zero (black) image.
    pub fn zeros(geom: ImageGeometry) -> Self {
        ImageTensor {
            data: Array3::zeros((Self::CHANNELS, geom.height, geom.width)),
        }
    }

    /// Constant-valued image; `value` is clamped to `[0,1]`.
    pub fn filled(geom: ImageGeometry, value: f64) -> Self {
        ImageTensor {
            data: Array3::from_elem(
                (Self::CHANNELS, geom.height, geom.width),
                value.clamp(0.0, 1.0),
            ),
        }
    }

    /// Builds an image from a per-element function of `(channel, y, x)`.
    /// Values are clamped to `[0,1]`.
    pub fn from_fn(geom: ImageGeometry, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        ImageTensor {
            data: Array3::from_shape_fn((Self::CHANNELS, geom.height, geom.width), |(c, y, x)| {
                f(c, y, x).clamp(0.0, 1.0)
            }),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn geometry(&self) -> ImageGeometry {
        ImageGeometry::new(self.height(), self.width())
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    /// Mean over all elements.
    pub fn mean(&self) -> f64 {
        self.data.mean().unwrap_or(0.0)
    }

    /// Mean absolute difference against another image of the same geometry.
    pub fn mean_abs_diff(&self, other: &ImageTensor) -> f64 {
        assert_eq!(self.data.dim(), other.data.dim(), "geometry mismatch");
        let n = self.data.len() as f64;
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n
    }

    /// Loads an 8-bit PNG and converts to `[0,1]` reals (value / 255).
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = Array3::from_shape_fn((Self::CHANNELS, h, w), |(c, y, x)| {
            f64::from(img.get_pixel(x as u32, y as u32).0[c]) / 255.0
        });
        Ok(ImageTensor { data })
    }

    /// Saves as 8-bit PNG, rounding each value to the nearest of 256 levels.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let img: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| {
                (self.data[[c, y as usize, x as usize]] * 255.0).round().clamp(0.0, 255.0) as u8
            };
            Rgb([px(0), px(1), px(2)])
        });
        img.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}
