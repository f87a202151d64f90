/// An `H×W×3` image, row-major with interleaved channels, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

pub const CHANNELS: usize = 3;

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), height * width * CHANNELS, "pixel buffer size");
        Image {
            height,
            width,
            pixels,
        }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Image::new(height, width, vec![value; height * width * CHANNELS])
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * CHANNELS + c]
    }

    /// `lambda·self + (1 − lambda)·other`.
    pub fn blend(&self, other: &Image, lambda: f64) -> Image {
        let pixels = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
            .collect();
        Image::new(self.height, self.width, pixels)
    }

    /// Zero-pads by `pad` on every side and crops an `H×W` window whose
    /// top-left corner sits at `(top, left)` in padded coordinates.
    pub fn pad_crop(&self, pad: usize, top: usize, left: usize) -> Image {
        let (h, w) = (self.height, self.width);
        let mut out = vec![0.0; self.pixels.len()];
        for y in 0..h {
            let sy = (y + top) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + left) as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let src = (sy as usize * w + sx as usize) * CHANNELS;
                let dst = (y * w + x) * CHANNELS;
                out[dst..dst + CHANNELS].copy_from_slice(&self.pixels[src..src + CHANNELS]);
            }
        }
        Image::new(h, w, out)
    }
}
