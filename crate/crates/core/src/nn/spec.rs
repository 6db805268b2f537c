use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One residual stage: `blocks` basic blocks of width `channels`; the first
/// block applies `stride`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub channels: usize,
    pub blocks: usize,
    pub stride: usize,
}

/// Topology of a mini residual network: optional 3x3 stem, residual stages,
/// global average pooling and a fully connected head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// (height, width, channels)
    pub input: (usize, usize, usize),
    /// Stem width; 0 means no stem.
    pub stem: usize,
    pub stages: Vec<StageSpec>,
    pub class_count: usize,
}

const ARCH_PREFIX: &str = "mrn-v1";

impl ModelSpec {
    /// The reference mini-resnet: 16-channel stem, stages 16/32/64 with two
    /// blocks each, stride 2 between stages.
    pub fn mini_resnet(input: (usize, usize, usize), class_count: usize) -> Self {
        Self {
            input,
            stem: 16,
            stages: vec![
                StageSpec { channels: 16, blocks: 2, stride: 1 },
                StageSpec { channels: 32, blocks: 2, stride: 2 },
                StageSpec { channels: 64, blocks: 2, stride: 2 },
            ],
            class_count,
        }
    }

    /// Pooling followed by the head only.
    pub fn linear_only(input: (usize, usize, usize), class_count: usize) -> Self {
        Self {
            input,
            stem: 0,
            stages: Vec::new(),
            class_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.input;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::InvalidArgument(format!("bad input dims {:?}", self.input)));
        }
        if self.class_count == 0 {
            return Err(Error::InvalidArgument("class_count must be positive".into()));
        }
        for s in &self.stages {
            if s.channels == 0 || s.blocks == 0 || s.stride == 0 {
                return Err(Error::InvalidArgument(format!("bad stage {s:?}")));
            }
        }
        Ok(())
    }

    /// Width of the pooled feature vector feeding the head.
    pub fn feature_width(&self) -> usize {
        self.stages
            .last()
            .map(|s| s.channels)
            .unwrap_or(if self.stem > 0 { self.stem } else { self.input.2 })
    }

    /// Architecture identifier; together with `class_count` it fixes every
    /// layer name and shape.
    pub fn arch_id(&self) -> String {
        let (h, w, c) = self.input;
        let stages: Vec<String> = self
            .stages
            .iter()
            .map(|s| format!("{}x{}s{}", s.channels, s.blocks, s.stride))
            .collect();
        format!(
            "{ARCH_PREFIX}:in={h}x{w}x{c}:stem={}:stages={}",
            self.stem,
            stages.join(",")
        )
    }

    pub fn from_arch_id(arch_id: &str, class_count: usize) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unrecognized arch id `{arch_id}`"));
        let mut parts = arch_id.split(':');
        if parts.next() != Some(ARCH_PREFIX) {
            return Err(bad());
        }
        let field = |p: Option<&str>, key: &str| -> Result<String> {
            p.and_then(|s| s.strip_prefix(key))
                .and_then(|s| s.strip_prefix('='))
                .map(str::to_string)
                .ok_or_else(bad)
        };
        let input = field(parts.next(), "in")?;
        let dims: Vec<usize> = input
            .split('x')
            .map(|d| d.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let [h, w, c] = dims[..] else { return Err(bad()) };
        let stem: usize = field(parts.next(), "stem")?.parse().map_err(|_| bad())?;
        let stages_str = field(parts.next(), "stages")?;
        if parts.next().is_some() {
            return Err(bad());
        }
        let stages = parse_stages(&stages_str).map_err(|_| bad())?;
        let spec = Self {
            input: (h, w, c),
            stem,
            stages,
            class_count,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Parses `"16x2s1,32x2s2"` (channels x blocks s stride); empty means none.
pub fn parse_stages(s: &str) -> Result<Vec<StageSpec>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|part| {
            let err = || Error::InvalidArgument(format!("bad stage `{part}`, expected e.g. 32x2s2"));
            let (ch, rest) = part.trim().split_once('x').ok_or_else(err)?;
            let (blocks, stride) = rest.split_once('s').ok_or_else(err)?;
            Ok(StageSpec {
                channels: ch.parse().map_err(|_| err())?,
                blocks: blocks.parse().map_err(|_| err())?,
                stride: stride.parse().map_err(|_| err())?,
            })
        })
        .collect()
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({} classes)", self.arch_id(), self.class_count)
    }
}

impl FromStr for StageSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let v = parse_stages(s)?;
        match v[..] {
            [one] => Ok(one),
            _ => Err(Error::InvalidArgument(format!("expected one stage, got `{s}`"))),
        }
    }
}

/// Parameter shape table for a spec, in checkpoint order.
pub(crate) fn layer_shapes(spec: &ModelSpec) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let bn = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str, c: usize| {
        for p in ["weight", "bias", "running_mean", "running_var"] {
            out.push((format!("{prefix}.{p}"), vec![c]));
        }
    };
    let mut c = spec.input.2;
    if spec.stem > 0 {
        out.push(("stem.conv.weight".into(), vec![3, 3, c, spec.stem]));
        bn(&mut out, "stem.bn", spec.stem);
        c = spec.stem;
    }
    for (i, stage) in spec.stages.iter().enumerate() {
        for b in 0..stage.blocks {
            let stride = if b == 0 { stage.stride } else { 1 };
            let p = format!("s{i}.b{b}");
            let co = stage.channels;
            out.push((format!("{p}.conv1.weight"), vec![3, 3, c, co]));
            bn(&mut out, &format!("{p}.bn1"), co);
            out.push((format!("{p}.conv2.weight"), vec![3, 3, co, co]));
            bn(&mut out, &format!("{p}.bn2"), co);
            if stride != 1 || c != co {
                out.push((format!("{p}.proj.weight"), vec![1, 1, c, co]));
                bn(&mut out, &format!("{p}.proj_bn"), co);
            }
            c = co;
        }
    }
    out.push(("head.weight".into(), vec![spec.class_count, c]));
    out.push(("head.bias".into(), vec![spec.class_count]));
    out
}
