use std::fs;
use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MTDS";
const VERSION: u32 = 1;

/// Labelled images sharing one `[C, H, W]` shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<Tensor>,
    labels: Vec<usize>,
    num_classes: usize,
    image_shape: [usize; 3],
}

impl Dataset {
    pub fn new(
        images: Vec<Tensor>,
        labels: Vec<usize>,
        num_classes: usize,
        image_shape: [usize; 3],
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::shape(
                "dataset",
                images.len(),
                format!("{} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: num_classes,
            });
        }
        if let Some(img) = images.iter().find(|t| t.shape() != image_shape) {
            return Err(Error::shape(
                "dataset",
                format!("{image_shape:?}"),
                format!("{:?}", img.shape()),
            ));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            image_shape,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &Tensor {
        &self.images[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    /// Items at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            image_shape: self.image_shape,
        }
    }

    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(self.len() as u32);
        w.u32(self.num_classes as u32);
        for d in self.image_shape {
            w.u32(d as u32);
        }
        for (img, &label) in self.images.iter().zip(&self.labels) {
            w.u32(label as u32);
            w.f32s(img.data());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "dataset");
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "dataset version {version}, expected {VERSION}"
            )));
        }
        let count = r.u32()? as usize;
        let num_classes = r.u32()? as usize;
        let shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let n: usize = shape.iter().product();
        let mut images = Vec::with_capacity(count.min(1 << 20));
        let mut labels = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            labels.push(r.u32()? as usize);
            images.push(Tensor::new(shape.to_vec(), r.f32s(n)?)?);
        }
        r.expect_end()?;
        Self::new(images, labels, num_classes, shape)
    }
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, ds.to_bytes())?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::from_bytes(&fs::read(path)?)
}
