use crate::error::{Error, Result};

use super::ConvKernel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamShape {
    Kernel {
        out_ch: usize,
        in_ch: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    },
    Bias(usize),
}

impl ParamShape {
    pub fn len(&self) -> usize {
        match *self {
            ParamShape::Kernel {
                out_ch,
                in_ch,
                kh,
                kw,
                ..
            } => out_ch * in_ch * kh * kw,
            ParamShape::Bias(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Dimensions as stored in checkpoints.
    pub fn dims(&self) -> Vec<usize> {
        match *self {
            ParamShape::Kernel {
                out_ch,
                in_ch,
                kh,
                kw,
                ..
            } => vec![out_ch, in_ch, kh, kw],
            ParamShape::Bias(n) => vec![n],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: ParamShape,
    pub values: Vec<f64>,
}

/// Named, ordered parameter store. Order is insertion order and is part of
/// the checkpoint format.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    entries: Vec<ParamEntry>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_kernel(&mut self, name: impl Into<String>, k: &ConvKernel) -> ParamId {
        let (out_ch, in_ch, kh, kw) = k.shape();
        self.push(ParamEntry {
            name: name.into(),
            shape: ParamShape::Kernel {
                out_ch,
                in_ch,
                kh,
                kw,
                stride: k.stride(),
                padding: k.padding(),
            },
            values: k.values().to_vec(),
        })
    }

    pub fn add_bias(&mut self, name: impl Into<String>, values: Vec<f64>) -> ParamId {
        self.push(ParamEntry {
            name: name.into(),
            shape: ParamShape::Bias(values.len()),
            values,
        })
    }

    fn push(&mut self, e: ParamEntry) -> ParamId {
        debug_assert!(
            self.find(&e.name).is_none(),
            "duplicate parameter {}",
            e.name
        );
        self.entries.push(e);
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].values
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].values
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn kernel(&self, id: ParamId) -> Result<ConvKernel> {
        let e = &self.entries[id.0];
        match e.shape {
            ParamShape::Kernel {
                out_ch,
                in_ch,
                kh,
                kw,
                stride,
                padding,
            } => ConvKernel::new((out_ch, in_ch, kh, kw), stride, padding, e.values.clone()),
            ParamShape::Bias(_) => Err(Error::invalid(format!("{} is not a kernel", e.name))),
        }
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }
}
