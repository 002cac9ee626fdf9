use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Integer ground-truth masks for a batch, with a cached one-hot encoding.
#[derive(Debug, Clone)]
pub struct LabelMap {
    n: usize,
    h: usize,
    w: usize,
    num_classes: usize,
    data: Vec<u8>,
    one_hot: Tensor,
}

impl LabelMap {
    /// `data` is row-major `(n, h, w)`. Any label outside
    /// `[0, num_classes)` is reported with its coordinates.
    pub fn new(data: Vec<u8>, n: usize, h: usize, w: usize, num_classes: usize, dtype: DType) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(Error::Shape(format!(
                "label buffer has {} entries, expected {n}x{h}x{w}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|&l| l as usize >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: data[pos] as i64,
                num_classes,
                image: pos / (h * w),
                row: (pos / w) % h,
                col: pos % w,
            });
        }
        let mut hot = vec![0f32; n * num_classes * h * w];
        for (pos, &l) in data.iter().enumerate() {
            let (b, rest) = (pos / (h * w), pos % (h * w));
            hot[(b * num_classes + l as usize) * h * w + rest] = 1.0;
        }
        let one_hot = Tensor::from_vec(hot, (n, num_classes, h, w), &Device::Cpu)?.to_dtype(dtype)?;
        Ok(Self {
            n,
            h,
            w,
            num_classes,
            data,
            one_hot,
        })
    }

    pub fn one_hot(&self) -> &Tensor {
        &self.one_hot
    }

    pub fn labels(&self) -> &[u8] {
        &self.data
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.h, self.w)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_of_class_two() {
        let m = LabelMap::new(vec![2], 1, 1, 1, 3, DType::F32).unwrap();
        assert_eq!(m.one_hot().flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![0., 0., 1.]);
    }

    #[test]
    fn out_of_range_reports_pixel() {
        let err = LabelMap::new(vec![0, 1, 0, 0, 0, 0, 0, 5], 2, 2, 2, 3, DType::F32).unwrap_err();
        match err {
            Error::LabelOutOfRange { label, image, row, col, .. } => {
                assert_eq!((label, image, row, col), (5, 1, 1, 1))
            }
            e => panic!("{e}"),
        }
    }
}
