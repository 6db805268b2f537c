use crate::checkpoint::{Checkpoint, HEAD_PREFIX};
use crate::error::{Error, Result};
use crate::nn::spec::{layer_shapes, ModelSpec};
use crate::rng::Stream;
use crate::tensor::Tensor;

/// Uniform in `[-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform(dims: Vec<usize>, fan_in: usize, rng: &mut Stream) -> Result<Tensor<f32>> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n = dims.iter().product();
    let data = (0..n)
        .map(|_| ((2.0 * rng.uniform() - 1.0) * bound) as f32)
        .collect();
    Tensor::new(dims, data)
}

fn init_tensor(name: &str, dims: &[usize], rng: &mut Stream) -> Result<Tensor<f32>> {
    let dims = dims.to_vec();
    if name.ends_with(".running_var") || (name.ends_with(".weight") && dims.len() == 1) {
        return Tensor::full(dims, 1.0);
    }
    match dims.len() {
        4 => {
            let fan_in = dims[0] * dims[1] * dims[2];
            kaiming_uniform(dims, fan_in, rng)
        }
        2 => {
            let fan_in = dims[1];
            kaiming_uniform(dims, fan_in, rng)
        }
        _ => Tensor::zeros(dims),
    }
}

/// Deterministically initialized checkpoint for `spec`.
///
/// Conv and linear weights are Kaiming-uniform; biases, batch-norm shifts
/// and running means are 0; batch-norm scales and running variances are 1.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Checkpoint> {
    spec.validate()?;
    let mut rng = Stream::new(seed, &[Stream::tag("init")]);
    let mut ckpt = Checkpoint::new(spec.arch_id(), spec.class_count);
    for (name, dims) in layer_shapes(spec) {
        let t = init_tensor(&name, &dims, &mut rng)?;
        ckpt.params.insert(name, t);
    }
    ckpt.meta.insert("init_seed".into(), seed.to_string());
    Ok(ckpt)
}

/// Re-initializes the head for `new_class_count` classes, copying every other
/// tensor unchanged.
pub fn replace_head(ckpt: &Checkpoint, new_class_count: usize, seed: u64) -> Result<Checkpoint> {
    if new_class_count == 0 {
        return Err(Error::InvalidArgument("class count must be positive".into()));
    }
    let features = ckpt.param("head.weight")?.dims()[1];
    let mut rng = Stream::new(seed, &[Stream::tag("head")]);
    let mut out = Checkpoint::new(ckpt.arch_id.clone(), new_class_count);
    out.meta = ckpt.meta.clone();
    for (name, t) in &ckpt.params {
        let t = if name.starts_with(HEAD_PREFIX) {
            match t.rank() {
                2 => kaiming_uniform(vec![new_class_count, features], features, &mut rng)?,
                _ => Tensor::zeros(vec![new_class_count])?,
            }
        } else {
            t.clone()
        };
        out.params.insert(name.clone(), t);
    }
    out.meta.insert("head_seed".into(), seed.to_string());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ModelSpec {
        ModelSpec::mini_resnet((16, 16, 3), 4)
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = build_model(&spec(), 1).unwrap();
        let b = build_model(&spec(), 1).unwrap();
        let c = build_model(&spec(), 2).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        assert!(!a.params["stem.conv.weight"].bit_eq(&c.params["stem.conv.weight"]));
    }

    #[test]
    fn specified_init_values() {
        let a = build_model(&spec(), 3).unwrap();
        for (name, t) in &a.params {
            if name.ends_with("bn1.weight") || name.ends_with("running_var") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            }
            if name.ends_with(".bias") || name.ends_with("running_mean") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
        let w = &a.params["s1.b0.conv1.weight"];
        let bound = (6.0f64 / (3 * 3 * 16) as f64).sqrt() as f32;
        assert!(w.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn head_replacement() {
        let a = build_model(&ModelSpec::mini_resnet((16, 16, 3), 4), 1).unwrap();
        let r = replace_head(&a, 33, 9).unwrap();
        assert_eq!(r.params["head.weight"].dims(), &[33, 64]);
        assert_eq!(r.class_count, 33);
        for (n, t) in &a.params {
            if !n.starts_with(HEAD_PREFIX) {
                assert!(r.params[n].bit_eq(t));
            }
        }
        let same = replace_head(&a, 4, 9).unwrap();
        assert!(!same.params["head.weight"].bit_eq(&a.params["head.weight"]));
        assert_eq!(same, replace_head(&a, 4, 9).unwrap());
    }
}
