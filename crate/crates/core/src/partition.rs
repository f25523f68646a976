//! Contiguous layer partitions and per-module parameter ownership.

use std::collections::BTreeSet;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::params::{ParamStore, META_PREFIX, QSPEC_PREFIX};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    boundaries: Vec<usize>,
}

impl Partition {
    /// Builds a partition from explicit boundaries `0 = l_0 < … < l_N = L`.
    pub fn from_boundaries(boundaries: Vec<usize>) -> Result<Self> {
        let ok = boundaries.len() >= 2 && boundaries[0] == 0 && boundaries.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(Error::contract(format!("invalid partition boundaries {boundaries:?}")));
        }
        Ok(Self { boundaries })
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn num_modules(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn num_layers(&self) -> usize {
        *self.boundaries.last().unwrap()
    }

    /// Layers owned by module `n` (zero-based).
    pub fn layers(&self, n: usize) -> Range<usize> {
        self.boundaries[n]..self.boundaries[n + 1]
    }

    pub fn module_of_layer(&self, layer: usize) -> Option<usize> {
        (0..self.num_modules()).find(|&n| self.layers(n).contains(&layer))
    }

    /// Module that owns a parameter, by name: embeddings go to the first
    /// module, the head to the last, layer parameters to their layer's
    /// module. Step sizes follow the tensor they quantize.
    pub fn owner(&self, name: &str) -> Option<usize> {
        let base = name.strip_prefix(QSPEC_PREFIX).unwrap_or(name);
        if base.starts_with("embed.") {
            return Some(0);
        }
        if base.starts_with("head.") {
            return Some(self.num_modules() - 1);
        }
        let rest = base.strip_prefix("layer.")?;
        let layer: usize = rest.split('.').next()?.parse().ok()?;
        self.module_of_layer(layer)
    }
}

/// Balanced split of `layers` into `modules` contiguous runs; sizes differ by
/// at most one and larger runs come first.
pub fn partition_layers(layers: usize, modules: usize) -> Result<Partition> {
    if modules == 0 || modules > layers {
        return Err(Error::contract(format!(
            "cannot split {layers} layers into {modules} modules"
        )));
    }
    let base = layers / modules;
    let extra = layers % modules;
    let mut boundaries = vec![0];
    for n in 0..modules {
        let size = base + usize::from(n < extra);
        boundaries.push(boundaries[n] + size);
    }
    Ok(Partition { boundaries })
}

/// The slice of a model trained by one module worker.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModuleView {
    pub index: usize,
    pub num_modules: usize,
    pub layers: Range<usize>,
    /// Latent weights, step sizes and full-precision parameters owned by
    /// this module.
    pub trainable: BTreeSet<String>,
}

impl ModuleView {
    pub fn is_first(&self) -> bool {
        self.index == 0
    }

    pub fn is_last(&self) -> bool {
        self.index + 1 == self.num_modules
    }
}

pub fn module_view<T: Scalar>(params: &ParamStore<T>, partition: &Partition, n: usize) -> Result<ModuleView> {
    if n >= partition.num_modules() {
        return Err(Error::contract(format!(
            "module {n} out of range for {} modules",
            partition.num_modules()
        )));
    }
    let mut trainable = BTreeSet::new();
    for name in params.names().filter(|s| !s.starts_with(META_PREFIX)) {
        match partition.owner(name) {
            Some(owner) if owner == n => {
                trainable.insert(name.to_owned());
            }
            Some(_) => {}
            None => return Err(Error::contract(format!("parameter `{name}` has no owning module"))),
        }
    }
    Ok(ModuleView {
        index: n,
        num_modules: partition.num_modules(),
        layers: partition.layers(n),
        trainable,
    })
}

pub fn module_views<T: Scalar>(params: &ParamStore<T>, partition: &Partition) -> Result<Vec<ModuleView>> {
    (0..partition.num_modules())
        .map(|n| module_view(params, partition, n))
        .collect()
}
