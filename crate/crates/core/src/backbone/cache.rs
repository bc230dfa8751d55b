use crate::tensor::Tensor;

/// Post-rotary keys and values of one layer, `len × d_model` each.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKV {
    pub k: Tensor,
    pub v: Tensor,
}

/// Key/value state of an encoded prefix. Positions continue at `len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixKV {
    layers: Vec<LayerKV>,
    len: usize,
}

impl PrefixKV {
    pub fn new(layers: Vec<LayerKV>) -> Self {
        let len = layers.first().map_or(0, |l| l.k.rows());
        debug_assert!(layers.iter().all(|l| l.k.rows() == len && l.v.rows() == len));
        Self { layers, len }
    }

    /// Prefix length, which is also the rotary offset of the next position.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.k.cols())
    }

    pub fn layer(&self, i: usize) -> &LayerKV {
        &self.layers[i]
    }

    /// Number of stored floats: `2 · n_layers · len · d_model`.
    pub fn footprint_floats(&self) -> usize {
        self.layers.iter().map(|l| l.k.numel() + l.v.numel()).sum()
    }

    pub fn bitwise_eq(&self, other: &PrefixKV) -> bool {
        let same = |a: &Tensor, b: &Tensor| {
            a.shape() == b.shape()
                && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        };
        self.len == other.len
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| same(&a.k, &b.k) && same(&a.v, &b.v))
    }
}
