use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Per-pixel class indices, row-major `height × width`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("label_map", format!("{height}x{width} map with {} entries", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self { height, width, data: vec![class; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, class: u8) {
        self.data[y * self.width + x] = class;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn max_class(&self) -> Option<u8> {
        self.data.iter().copied().max()
    }
}

/// One-hot `[N, C, H, W]` encoding of a batch of label maps.
#[derive(Clone, Debug, PartialEq)]
pub struct OneHot<T: Element = f32>(Tensor<T>);

impl<T: Element> OneHot<T> {
    pub fn from_labels(labels: &[&LabelMap], num_classes: usize) -> Result<Self> {
        let first = labels.first().ok_or(Error::Empty("one-hot batch"))?;
        let (h, w) = first.dims();
        let plane = h * w;
        let mut data = vec![T::zero(); labels.len() * num_classes * plane];
        for (i, l) in labels.iter().enumerate() {
            if l.dims() != (h, w) {
                return Err(Error::shape("one_hot", format!("label {i} is {:?}, expected {:?}", l.dims(), (h, w))));
            }
            for (u, &c) in l.data().iter().enumerate() {
                if c as usize >= num_classes {
                    return Err(Error::invalid("one_hot", format!("class {c} >= num classes {num_classes}")));
                }
                data[(i * num_classes + c as usize) * plane + u] = T::one();
            }
        }
        Ok(Self(Tensor::new(vec![labels.len(), num_classes, h, w], data)?))
    }

    /// Wraps a tensor after checking it is exactly one-hot along channels.
    pub fn from_tensor(t: Tensor<T>) -> Result<Self> {
        let [n, c, h, w] = t.dims4("one_hot")?;
        let plane = h * w;
        for i in 0..n {
            for u in 0..plane {
                let mut sum = T::zero();
                for ch in 0..c {
                    let v = t.data()[(i * c + ch) * plane + u];
                    if v != T::zero() && v != T::one() {
                        return Err(Error::invalid("one_hot", "entries must be 0 or 1"));
                    }
                    sum += v;
                }
                if sum != T::one() {
                    return Err(Error::invalid("one_hot", "each pixel needs exactly one active class"));
                }
            }
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn shape(&self) -> &[usize] {
        self.0.shape()
    }

    pub fn cast<U: Element>(&self) -> OneHot<U> {
        OneHot(self.0.cast())
    }
}
