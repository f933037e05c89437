use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

/// Per-layer key/value tensors summarizing a processed prefix.
///
/// Each layer stores `K` and `V` laid out as `[heads][prefix_len][head_dim]`.
/// `selected` marks the layers exposed to optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextCache {
    heads: usize,
    head_dim: usize,
    len: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    selected: Vec<bool>,
}

/// Graph handles for a cache: `None` for a layer when the prefix is empty.
#[derive(Debug, Clone)]
pub struct CacheNodes {
    pub(crate) layers: Vec<Option<(NodeId, NodeId)>>,
    selected: Vec<bool>,
}

/// Gradient of a loss with respect to each selected layer's `(K, V)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheGrads {
    pub layers: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl ContextCache {
    pub fn empty(layers: usize, heads: usize, head_dim: usize) -> Self {
        Self {
            heads,
            head_dim,
            len: 0,
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
            selected: vec![true; layers],
        }
    }

    /// Builds a cache from per-layer `(K, V)` tensors shaped `[heads, len, head_dim]`.
    pub fn from_tensors(layers: Vec<(Tensor, Tensor)>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::InvalidInput("cache needs at least one layer".into()))?;
        let shape = first.0.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "cache tensor shape {shape:?}"
            )));
        }
        let (heads, len, head_dim) = (shape[0], shape[1], shape[2]);
        let mut cache = Self::empty(layers.len(), heads, head_dim);
        cache.len = len;
        for (l, (k, v)) in layers.into_iter().enumerate() {
            if k.shape() != shape.as_slice() || v.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {l}: K {:?} and V {:?}, expected {shape:?}",
                    k.shape(),
                    v.shape()
                )));
            }
            cache.keys[l] = k.into_data();
            cache.values[l] = v.into_data();
        }
        Ok(cache)
    }

    pub fn num_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn prefix_len(&self) -> usize {
        self.len
    }

    pub fn keys(&self, layer: usize) -> &[f64] {
        &self.keys[layer]
    }

    pub fn values(&self, layer: usize) -> &[f64] {
        &self.values[layer]
    }

    pub fn keys_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.keys[layer]
    }

    pub fn values_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.values[layer]
    }

    pub fn is_selected(&self, layer: usize) -> bool {
        self.selected[layer]
    }

    pub fn selected_layers(&self) -> Vec<usize> {
        (0..self.num_layers())
            .filter(|&l| self.selected[l])
            .collect()
    }

    /// Restricts optimization to `layers`.
    pub fn select_layers(&mut self, layers: &[usize]) -> Result<()> {
        if let Some(bad) = layers.iter().find(|&&l| l >= self.num_layers()) {
            return Err(Error::InvalidParameter(format!(
                "context layer {bad} out of range for {} layers",
                self.num_layers()
            )));
        }
        self.selected = (0..self.num_layers())
            .map(|l| layers.contains(&l))
            .collect();
        Ok(())
    }

    /// Appends one position; `new_k[l]`, `new_v[l]` hold `heads * head_dim` values.
    pub fn append(&mut self, new_k: &[Vec<f64>], new_v: &[Vec<f64>]) -> Result<()> {
        let per_pos = self.heads * self.head_dim;
        if new_k.len() != self.num_layers() || new_v.len() != self.num_layers() {
            return Err(Error::ShapeMismatch(format!(
                "append with {} key layers for a {}-layer cache",
                new_k.len(),
                self.num_layers()
            )));
        }
        for l in 0..self.num_layers() {
            if new_k[l].len() != per_pos || new_v[l].len() != per_pos {
                return Err(Error::ShapeMismatch(format!("append: layer {l} row width")));
            }
            self.keys[l] = insert_position(
                &self.keys[l],
                &new_k[l],
                self.heads,
                self.len,
                self.head_dim,
            );
            self.values[l] = insert_position(
                &self.values[l],
                &new_v[l],
                self.heads,
                self.len,
                self.head_dim,
            );
        }
        self.len += 1;
        Ok(())
    }

    /// Adds the cache to `graph`; selected layers become differentiable leaves.
    pub fn to_graph(&self, graph: &mut Graph) -> CacheNodes {
        let layers = (0..self.num_layers())
            .map(|l| {
                if self.len == 0 {
                    return None;
                }
                let shape = vec![self.heads, self.len, self.head_dim];
                let k = Tensor::new(shape.clone(), self.keys[l].clone()).expect("cache layout");
                let v = Tensor::new(shape, self.values[l].clone()).expect("cache layout");
                Some(if self.selected[l] {
                    (graph.leaf(k.with_grad()), graph.leaf(v.with_grad()))
                } else {
                    (graph.constant(k), graph.constant(v))
                })
            })
            .collect();
        CacheNodes {
            layers,
            selected: self.selected.clone(),
        }
    }

    pub fn l2_distance(&self, other: &ContextCache) -> f64 {
        self.keys
            .iter()
            .chain(&self.values)
            .zip(other.keys.iter().chain(&other.values))
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)))
            .sum::<f64>()
            .sqrt()
    }
}

fn insert_position(old: &[f64], row: &[f64], heads: usize, len: usize, hd: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(heads * (len + 1) * hd);
    for h in 0..heads {
        out.extend_from_slice(&old[h * len * hd..(h + 1) * len * hd]);
        out.extend_from_slice(&row[h * hd..(h + 1) * hd]);
    }
    out
}

impl CacheNodes {
    pub fn layer(&self, l: usize) -> Option<(NodeId, NodeId)> {
        self.layers[l]
    }

    /// Differentiable leaves, `(layer, K, V)`.
    pub fn grad_leaves(&self) -> Vec<(usize, NodeId, NodeId)> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(l, _)| self.selected[*l])
            .filter_map(|(l, kv)| kv.map(|(k, v)| (l, k, v)))
            .collect()
    }

    /// Reverse sweep from `loss` to every selected layer.
    pub fn gradients(&self, graph: &Graph, loss: NodeId) -> Result<CacheGrads> {
        let leaves = self.grad_leaves();
        let ids: Vec<NodeId> = leaves.iter().flat_map(|&(_, k, v)| [k, v]).collect();
        let mut grads = graph.backward(loss, &ids)?.into_iter();
        let mut layers = vec![None; self.layers.len()];
        for (l, _, _) in leaves {
            let gk = grads.next().expect("one gradient per leaf").into_data();
            let gv = grads.next().expect("one gradient per leaf").into_data();
            layers[l] = Some((gk, gv));
        }
        Ok(CacheGrads { layers })
    }
}

impl CacheGrads {
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|g| {
                    g.as_ref().map(|(k, v)| {
                        (
                            k.iter().map(|x| x * factor).collect(),
                            v.iter().map(|x| x * factor).collect(),
                        )
                    })
                })
                .collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .flatten()
            .flat_map(|(k, v)| k.iter().chain(v))
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}
