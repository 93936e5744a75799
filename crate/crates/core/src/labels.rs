use crate::engine::{Scalar, Shape4, Tensor};
use crate::error::{Error, Result};

/// Per-pixel class indices for a batch, `(N, H, W)` in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    n: usize,
    h: usize,
    w: usize,
    classes: usize,
    data: Vec<u8>,
}

/// Source coordinate for nearest-neighbour resampling of one axis.
pub(crate) fn nearest_source(o: usize, in_len: usize, out_len: usize) -> usize {
    (((2 * o + 1) * in_len) / (2 * out_len)).min(in_len - 1)
}

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, classes: usize, data: Vec<u8>) -> Result<Self> {
        if classes == 0 || classes > 256 {
            return Err(Error::Config(format!("class count {classes} must be in 1..=256")));
        }
        if data.len() != n * h * w {
            return Err(Error::Data(format!(
                "label map ({n}, {h}, {w}) needs {} values, got {}",
                n * h * w,
                data.len()
            )));
        }
        let map = LabelMap {
            n,
            h,
            w,
            classes,
            data,
        };
        map.check_range(classes)?;
        Ok(map)
    }

    pub fn filled(n: usize, h: usize, w: usize, classes: usize, value: u8) -> Result<Self> {
        LabelMap::new(n, h, w, classes, vec![value; n * h * w])
    }

    /// Fails with the first pixel whose label is not below `classes`.
    pub fn check_range(&self, classes: usize) -> Result<()> {
        if let Some(i) = self.data.iter().position(|&v| v as usize >= classes) {
            let (b, y, x) = (i / (self.h * self.w), (i / self.w) % self.h, i % self.w);
            return Err(Error::Data(format!(
                "label {} at pixel (batch {b}, row {y}, col {x}) is not below class count {classes}",
                self.data[i]
            )));
        }
        Ok(())
    }

    pub fn batch(&self) -> usize {
        self.n
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn at(&self, n: usize, y: usize, x: usize) -> u8 {
        self.data[(n * self.h + y) * self.w + x]
    }

    /// Single batch item as its own map.
    pub fn item(&self, n: usize) -> LabelMap {
        let len = self.h * self.w;
        LabelMap {
            n: 1,
            h: self.h,
            w: self.w,
            classes: self.classes,
            data: self.data[n * len..(n + 1) * len].to_vec(),
        }
    }

    /// Concatenates maps of identical extent along the batch axis.
    pub fn stack(items: &[&LabelMap]) -> Result<LabelMap> {
        let first = items
            .first()
            .ok_or_else(|| Error::Usage("cannot stack zero label maps".into()))?;
        let mut data = Vec::new();
        let mut n = 0;
        for m in items {
            if (m.h, m.w, m.classes) != (first.h, first.w, first.classes) {
                return Err(Error::Config(format!(
                    "cannot stack label maps of extent {}x{} (K={}) and {}x{} (K={})",
                    first.h, first.w, first.classes, m.h, m.w, m.classes
                )));
            }
            data.extend_from_slice(&m.data);
            n += m.n;
        }
        Ok(LabelMap {
            n,
            h: first.h,
            w: first.w,
            classes: first.classes,
            data,
        })
    }

    /// Nearest-neighbour resampling to `(out_h, out_w)`.
    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> LabelMap {
        let mut data = Vec::with_capacity(self.n * out_h * out_w);
        for b in 0..self.n {
            for y in 0..out_h {
                let sy = nearest_source(y, self.h, out_h);
                for x in 0..out_w {
                    data.push(self.at(b, sy, nearest_source(x, self.w, out_w)));
                }
            }
        }
        LabelMap {
            n: self.n,
            h: out_h,
            w: out_w,
            classes: self.classes,
            data,
        }
    }

    pub fn one_hot<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(Shape4::new(self.n, self.classes, self.h, self.w), |n, c, y, x| {
            if self.at(n, y, x) as usize == c {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    /// Per-pixel argmax over channels; ties go to the lowest class index.
    pub fn argmax<T: Scalar>(probs: &Tensor<T>) -> Result<LabelMap> {
        let s = probs.shape();
        let mut data = Vec::with_capacity(s.n * s.plane());
        for n in 0..s.n {
            for y in 0..s.h {
                for x in 0..s.w {
                    let mut best = 0;
                    for c in 1..s.c {
                        if probs.at(n, c, y, x) > probs.at(n, best, y, x) {
                            best = c;
                        }
                    }
                    data.push(best as u8);
                }
            }
        }
        LabelMap::new(s.n, s.h, s.w, s.c, data)
    }

    /// Count of pixels per class.
    pub fn histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &v in &self.data {
            counts[v as usize] += 1;
        }
        counts
    }
}
