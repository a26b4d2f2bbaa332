use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Name, shape and location of one parameter tensor inside a store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Location of a tensor in the flat buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    #[inline]
    pub fn of<'a, T>(&self, data: &'a [T]) -> &'a [T] {
        &data[self.offset..self.offset + self.len]
    }

    #[inline]
    pub fn of_mut<'a, T>(&self, data: &'a mut [T]) -> &'a mut [T] {
        &mut data[self.offset..self.offset + self.len]
    }
}

/// All parameters of a model in one contiguous buffer. Gradients and
/// optimizer state use buffers of the same length and layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    specs: Vec<ParamSpec>,
    data: Vec<T>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            specs: Vec::new(),
            data: Vec::new(),
        }
    }

    /// Appends a tensor filled by `init`. Names must be unique.
    pub fn alloc(&mut self, name: String, shape: Vec<usize>, mut init: impl FnMut() -> T) -> Slot {
        assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        let len = shape.iter().product();
        let offset = self.data.len();
        self.data.extend((0..len).map(|_| init()));
        self.specs.push(ParamSpec {
            name,
            shape,
            offset,
            len,
        });
        Slot { offset, len }
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn spec(&self, name: &str) -> Option<&ParamSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.spec(name).map(|s| &self.data[s.offset..s.offset + s.len])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let s = self.spec(name)?.clone();
        Some(&mut self.data[s.offset..s.offset + s.len])
    }

    pub fn slot(&self, name: &str) -> Option<Slot> {
        self.spec(name).map(|s| Slot {
            offset: s.offset,
            len: s.len,
        })
    }

    #[cfg(test)]
    pub(crate) fn from_parts(specs: Vec<ParamSpec>, data: Vec<T>) -> Self {
        Self { specs, data }
    }
}

/// Stable 64-bit FNV-1a hash, used to give each parameter its own stream.
pub(crate) fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
