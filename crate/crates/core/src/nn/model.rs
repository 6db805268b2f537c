//! Parameter store plus the forward/backward pass of the mini residual network.

use crate::checkpoint::{is_head, Checkpoint};
use crate::error::{Error, Result};
use crate::nn::layers::{
    bn_backward, bn_forward, bn_update_running, conv2d_backward, conv2d_forward, gap_backward,
    gap_forward, linear_backward, linear_forward, relu_backward_inplace, relu_inplace, Act,
    BnCache, BnMode, ConvGeom,
};
use crate::nn::spec::{layer_shapes, ModelSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Per-parameter frozen flags, aligned with checkpoint order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeMask {
    pub names: Vec<String>,
    pub frozen: Vec<bool>,
}

impl FreezeMask {
    pub fn none(ckpt: &Checkpoint) -> Self {
        Self {
            names: ckpt.params.keys().cloned().collect(),
            frozen: vec![false; ckpt.params.len()],
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.frozen[i])
            .unwrap_or(false)
    }

    pub fn trainable_count(&self) -> usize {
        self.frozen.iter().filter(|f| !**f).count()
    }
}

/// Freezes every parameter except the final fully connected weight and bias.
/// Batch-norm layers under a frozen mask also stop tracking statistics.
pub fn freeze_except_head(ckpt: &Checkpoint) -> FreezeMask {
    let names: Vec<String> = ckpt.params.keys().cloned().collect();
    let frozen = names.iter().map(|n| !is_head(n)).collect();
    FreezeMask { names, frozen }
}

#[derive(Debug, Clone, Copy)]
struct BnIdx {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvBn {
    conv: usize,
    stride: usize,
    bn: BnIdx,
}

#[derive(Debug, Clone)]
struct Block {
    c1: ConvBn,
    c2: ConvBn,
    proj: Option<ConvBn>,
}

#[derive(Debug, Clone)]
struct Layout {
    stem: Option<ConvBn>,
    blocks: Vec<Block>,
    head_w: usize,
    head_b: usize,
}

/// A checkpoint materialized in scalar type `T` with its layer graph resolved.
#[derive(Debug, Clone)]
pub struct Network<T> {
    spec: ModelSpec,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    layout: Layout,
}

struct ConvBnTape<T> {
    input: Act<T>,
    bn: BnCache<T>,
}

struct BlockTape<T> {
    c1: ConvBnTape<T>,
    /// Post-ReLU activation between the two convolutions.
    mid: Act<T>,
    c2: ConvBnTape<T>,
    proj: Option<ConvBnTape<T>>,
    /// Block output after the final ReLU.
    out: Act<T>,
}

/// Everything the backward pass needs from a forward pass.
pub struct Tape<T> {
    stem: Option<(ConvBnTape<T>, Act<T>)>,
    blocks: Vec<BlockTape<T>>,
    last_shape: (usize, usize, usize, usize),
    pub features: Vec<T>,
    pub logits: Vec<T>,
}

impl<T: Scalar> Tape<T> {
    /// Sign pattern of every ReLU output, in forward order.
    pub(crate) fn relu_pattern(&self) -> Vec<bool> {
        let stem = self.stem.iter().map(|(_, y)| y);
        let blocks = self.blocks.iter().flat_map(|b| [&b.mid, &b.out]);
        stem.chain(blocks)
            .flat_map(|a| a.data.iter().map(|&v| v > T::zero()))
            .collect()
    }
}

/// Gradients aligned with parameter order; `None` for non-trainable entries
/// (running statistics) and for parameters the pass did not reach.
#[derive(Debug, Clone)]
pub struct Grads<T> {
    pub per_param: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Network<T> {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let spec = ModelSpec::from_arch_id(&ckpt.arch_id, ckpt.class_count)?;
        let expected = layer_shapes(&spec);
        if expected.len() != ckpt.params.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} tensors, arch `{}` needs {}",
                ckpt.params.len(),
                ckpt.arch_id,
                expected.len()
            )));
        }
        for ((name, dims), (cname, t)) in expected.iter().zip(&ckpt.params) {
            if name != cname || dims.as_slice() != t.dims() {
                return Err(Error::Shape(format!(
                    "expected `{name}` {dims:?}, found `{cname}` {:?}",
                    t.dims()
                )));
            }
        }
        let names: Vec<String> = expected.into_iter().map(|(n, _)| n).collect();
        let layout = resolve_layout(&spec, &names);
        Ok(Self {
            spec,
            names,
            params: ckpt.params.values().map(Tensor::cast).collect(),
            layout,
        })
    }

    /// Writes the current parameters back into a checkpoint (meta copied from `template`).
    pub fn to_checkpoint(&self, template: &Checkpoint) -> Checkpoint {
        let mut out = Checkpoint::new(self.spec.arch_id(), self.spec.class_count);
        out.meta = template.meta.clone();
        for (n, t) in self.names.iter().zip(&self.params) {
            out.params.insert(n.clone(), t.cast());
        }
        out
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    /// Whether the optimizer may update parameter `i` at all.
    pub fn is_trainable(&self, i: usize) -> bool {
        !(self.names[i].ends_with(".running_mean") || self.names[i].ends_with(".running_var"))
    }

    fn bn_mode(&self, idx: BnIdx, mode: Mode, mask: Option<&FreezeMask>) -> BnMode {
        let frozen = mask.is_some_and(|m| m.frozen[idx.gamma]);
        match mode {
            Mode::Train if !frozen => BnMode::Batch,
            _ => BnMode::Running,
        }
    }

    fn conv_bn(
        &self,
        cb: ConvBn,
        x: Act<T>,
        mode: Mode,
        mask: Option<&FreezeMask>,
    ) -> (Act<T>, ConvBnTape<T>) {
        let w = &self.params[cb.conv];
        let g = ConvGeom::from_dims(w.dims(), cb.stride);
        let a = conv2d_forward(&x, w.data(), g);
        let (y, cache) = bn_forward(
            &a,
            self.params[cb.bn.gamma].data(),
            self.params[cb.bn.beta].data(),
            self.params[cb.bn.mean].data(),
            self.params[cb.bn.var].data(),
            self.bn_mode(cb.bn, mode, mask),
        );
        (y, ConvBnTape { input: x, bn: cache })
    }

    /// Runs the network; parameters are not modified.
    pub fn forward(&self, x: &Act<T>, mode: Mode, mask: Option<&FreezeMask>) -> Result<Tape<T>> {
        let (h, w, c) = self.spec.input;
        if (x.h, x.w, x.c) != (h, w, c) || x.n == 0 {
            return Err(Error::Shape(format!(
                "input {}x{}x{}x{} does not match model input {h}x{w}x{c}",
                x.n, x.h, x.w, x.c
            )));
        }
        let mut cur = x.clone();
        let stem = match self.layout.stem {
            Some(cb) => {
                let (mut y, t) = self.conv_bn(cb, cur, mode, mask);
                relu_inplace(&mut y);
                cur = y.clone();
                Some((t, y))
            }
            None => None,
        };
        let mut blocks = Vec::with_capacity(self.layout.blocks.len());
        for b in &self.layout.blocks {
            let (mut mid, c1) = self.conv_bn(b.c1, cur.clone(), mode, mask);
            relu_inplace(&mut mid);
            let (e, c2) = self.conv_bn(b.c2, mid.clone(), mode, mask);
            let (shortcut, proj) = match b.proj {
                Some(p) => {
                    let (s, t) = self.conv_bn(p, cur, mode, mask);
                    (s, Some(t))
                }
                None => (cur, None),
            };
            let mut out = e;
            for (o, s) in out.data.iter_mut().zip(&shortcut.data) {
                *o += *s;
            }
            relu_inplace(&mut out);
            cur = out.clone();
            blocks.push(BlockTape { c1, mid, c2, proj, out });
        }
        let features = gap_forward(&cur);
        let logits = linear_forward(
            &features,
            cur.n,
            self.params[self.layout.head_w].data(),
            self.params[self.layout.head_b].data(),
        );
        Ok(Tape {
            stem,
            blocks,
            last_shape: (cur.n, cur.h, cur.w, cur.c),
            features,
            logits,
        })
    }

    /// Moves running statistics toward the batch statistics recorded in `tape`.
    pub fn update_running_stats(&mut self, tape: &Tape<T>) {
        let mut updates: Vec<(BnIdx, &ConvBnTape<T>)> = Vec::new();
        if let (Some(cb), Some((t, _))) = (self.layout.stem, tape.stem.as_ref()) {
            updates.push((cb.bn, t));
        }
        for (b, bt) in self.layout.blocks.iter().zip(&tape.blocks) {
            updates.push((b.c1.bn, &bt.c1));
            updates.push((b.c2.bn, &bt.c2));
            if let (Some(p), Some(pt)) = (b.proj, bt.proj.as_ref()) {
                updates.push((p.bn, pt));
            }
        }
        for (idx, t) in updates {
            if t.bn.mode != BnMode::Batch {
                continue;
            }
            let pixels = t.bn.xhat.len() / t.bn.batch_mean.len();
            let (mean, var) = two_mut(&mut self.params, idx.mean, idx.var);
            bn_update_running(&t.bn, pixels, mean.data_mut(), var.data_mut());
        }
    }

    fn conv_bn_backward(
        &self,
        cb: ConvBn,
        t: &ConvBnTape<T>,
        dy: &Act<T>,
        grads: &mut Grads<T>,
        need_dx: bool,
    ) -> Option<Act<T>> {
        let (da, dgamma, dbeta) = bn_backward(dy, self.params[cb.bn.gamma].data(), &t.bn);
        grads.per_param[cb.bn.gamma] = Some(dgamma);
        grads.per_param[cb.bn.beta] = Some(dbeta);
        let w = &self.params[cb.conv];
        let g = ConvGeom::from_dims(w.dims(), cb.stride);
        let (dx, dw) = conv2d_backward(&t.input, w.data(), g, &da, need_dx);
        grads.per_param[cb.conv] = Some(dw);
        dx
    }

    /// Backpropagates `dlogits` through the pass recorded in `tape`. When
    /// every encoder parameter is frozen only the head gradients are formed.
    pub fn backward(&self, tape: &Tape<T>, dlogits: &[T], mask: Option<&FreezeMask>) -> Grads<T> {
        let mut grads = Grads {
            per_param: vec![None; self.params.len()],
        };
        let (n, h, w, c) = tape.last_shape;
        let (dfeat, dw, db) =
            linear_backward(&tape.features, n, self.params[self.layout.head_w].data(), dlogits);
        grads.per_param[self.layout.head_w] = Some(dw);
        grads.per_param[self.layout.head_b] = Some(db);

        let encoder_trainable = (0..self.params.len()).any(|i| {
            i != self.layout.head_w
                && i != self.layout.head_b
                && self.is_trainable(i)
                && !mask.is_some_and(|m| m.frozen[i])
        });
        if !encoder_trainable {
            return grads;
        }

        let mut d = gap_backward(&dfeat, n, h, w, c);
        for (b, bt) in self.layout.blocks.iter().zip(&tape.blocks).rev() {
            relu_backward_inplace(&bt.out, &mut d);
            let mut dmid = self
                .conv_bn_backward(b.c2, &bt.c2, &d, &mut grads, true)
                .expect("dx requested");
            relu_backward_inplace(&bt.mid, &mut dmid);
            let mut dx = self
                .conv_bn_backward(b.c1, &bt.c1, &dmid, &mut grads, true)
                .expect("dx requested");
            let dshort = match (b.proj, bt.proj.as_ref()) {
                (Some(p), Some(pt)) => self
                    .conv_bn_backward(p, pt, &d, &mut grads, true)
                    .expect("dx requested"),
                _ => d,
            };
            for (a, s) in dx.data.iter_mut().zip(&dshort.data) {
                *a += *s;
            }
            d = dx;
        }
        if let (Some(cb), Some((t, out))) = (self.layout.stem, tape.stem.as_ref()) {
            relu_backward_inplace(out, &mut d);
            self.conv_bn_backward(cb, t, &d, &mut grads, false);
        }
        grads
    }

    /// Name of the first parameter holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.names
            .iter()
            .zip(&self.params)
            .find(|(_, t)| !t.is_finite())
            .map(|(n, _)| n.as_str())
    }
}

fn two_mut<T>(v: &mut [T], a: usize, b: usize) -> (&mut T, &mut T) {
    assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

fn resolve_layout(spec: &ModelSpec, names: &[String]) -> Layout {
    let idx = |n: &str| {
        names
            .iter()
            .position(|x| x == n)
            .unwrap_or_else(|| panic!("layer table lacks `{n}`"))
    };
    let bn = |p: &str| BnIdx {
        gamma: idx(&format!("{p}.weight")),
        beta: idx(&format!("{p}.bias")),
        mean: idx(&format!("{p}.running_mean")),
        var: idx(&format!("{p}.running_var")),
    };
    let stem = (spec.stem > 0).then(|| ConvBn {
        conv: idx("stem.conv.weight"),
        stride: 1,
        bn: bn("stem.bn"),
    });
    let mut blocks = Vec::new();
    for (i, stage) in spec.stages.iter().enumerate() {
        for b in 0..stage.blocks {
            let p = format!("s{i}.b{b}");
            let stride = if b == 0 { stage.stride } else { 1 };
            let proj_name = format!("{p}.proj.weight");
            let proj = names.contains(&proj_name).then(|| ConvBn {
                conv: idx(&proj_name),
                stride,
                bn: bn(&format!("{p}.proj_bn")),
            });
            blocks.push(Block {
                c1: ConvBn {
                    conv: idx(&format!("{p}.conv1.weight")),
                    stride,
                    bn: bn(&format!("{p}.bn1")),
                },
                c2: ConvBn {
                    conv: idx(&format!("{p}.conv2.weight")),
                    stride: 1,
                    bn: bn(&format!("{p}.bn2")),
                },
                proj,
            });
        }
    }
    Layout {
        stem,
        blocks,
        head_w: idx("head.weight"),
        head_b: idx("head.bias"),
    }
}
