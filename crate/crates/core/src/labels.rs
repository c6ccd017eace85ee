use crate::error::{Error, Result};

/// Label value for pixels that carry no ground truth.
pub const IGNORE_LABEL: u8 = 255;

/// Row-major `H×W` grid of class indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim(
                "label map",
                format!("{height}x{width} needs {} labels, got {}", height * width, data.len()),
            ));
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Checks every label is a class index below `num_classes` or [`IGNORE_LABEL`].
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self
            .data
            .iter()
            .find(|&&l| l != IGNORE_LABEL && l as usize >= num_classes)
        {
            Some(l) => Err(Error::Validation(format!(
                "label {l} out of range for {num_classes} classes"
            ))),
            None => Ok(()),
        }
    }

    /// Nearest-neighbour subsampling: output pixel `(y, x)` takes the label at
    /// `(y*stride, x*stride)`.
    pub fn downsample(&self, stride: usize) -> Result<LabelMap> {
        if stride == 0 || !self.height.is_multiple_of(stride) || !self.width.is_multiple_of(stride) {
            return Err(Error::Validation(format!(
                "label map {}x{} not divisible by stride {stride}",
                self.height, self.width
            )));
        }
        if stride == 1 {
            return Ok(self.clone());
        }
        let (h, w) = (self.height / stride, self.width / stride);
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(self.get(y * stride, x * stride));
            }
        }
        LabelMap::new(h, w, data)
    }

    pub fn distinct_classes(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &l in &self.data {
            seen[l as usize] = true;
        }
        (0..255u8).filter(|&l| seen[l as usize]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_takes_top_left_of_each_block() {
        let m = LabelMap::new(2, 4, vec![0, 0, 1, 1, 0, 2, 1, 255]).unwrap();
        let d = m.downsample(2).unwrap();
        assert_eq!((d.height, d.width), (1, 2));
        assert_eq!(d.data, vec![0, 1]);
        assert!(m.downsample(3).is_err());
    }

    #[test]
    fn validate_allows_ignore() {
        let m = LabelMap::new(1, 3, vec![0, 255, 1]).unwrap();
        assert!(m.validate(2).is_ok());
        assert!(m.validate(1).is_err());
        assert_eq!(m.distinct_classes(), vec![0, 1]);
    }
}
