//! Parameter containers and initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use uniqa_tensor::{Scalar, Tape, Tensor, Var};

use crate::error::NetError;

/// Kaiming-uniform fan-in draw: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
fn kaiming<S: Scalar>(dims: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(dims, |_| S::from_f64(rng.gen_range(-bound..bound))).with_grad()
}

#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

/// One convolutional layer: weight [C_out, C_in, k, k] plus bias.
#[derive(Clone, Debug)]
pub struct ConvParams<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> ConvParams<S> {
    pub fn kaiming(c_out: usize, c_in: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvParams {
            weight: kaiming(vec![c_out, c_in, k, k], c_in * k * k, rng),
            bias: Tensor::zeros(vec![c_out]).with_grad(),
        }
    }

    pub fn zeros(c_out: usize, c_in: usize, k: usize) -> Self {
        ConvParams {
            weight: Tensor::zeros(vec![c_out, c_in, k, k]).with_grad(),
            bias: Tensor::zeros(vec![c_out]).with_grad(),
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.dims()[3]
    }

    /// Same-size padding for this kernel.
    pub fn padding(&self) -> usize {
        (self.kernel_size() - 1) / 2
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, S>) -> ConvVars {
        ConvVars {
            weight: tape.param(&self.weight),
            bias: tape.param(&self.bias),
        }
    }

    pub fn apply(
        &self,
        tape: &mut Tape<'_, S>,
        vars: ConvVars,
        x: Var,
    ) -> Result<Var, NetError> {
        Ok(tape.conv2d(x, vars.weight, vars.bias, self.padding())?)
    }
}

/// Fully connected layer: weight [out, in] plus bias.
#[derive(Clone, Debug)]
pub struct LinearParams<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> LinearParams<S> {
    pub fn kaiming(out: usize, inp: usize, rng: &mut ChaCha8Rng) -> Self {
        LinearParams {
            weight: kaiming(vec![out, inp], inp, rng),
            bias: Tensor::zeros(vec![out]).with_grad(),
        }
    }

    pub fn zeros(out: usize, inp: usize) -> Self {
        LinearParams {
            weight: Tensor::zeros(vec![out, inp]).with_grad(),
            bias: Tensor::zeros(vec![out]).with_grad(),
        }
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, S>) -> LinearVars {
        LinearVars {
            weight: tape.param(&self.weight),
            bias: tape.param(&self.bias),
        }
    }
}

/// Feature extraction block: two 3x3 convolutions, each followed by ReLU.
#[derive(Clone, Debug)]
pub struct FebParams<S> {
    pub conv1: ConvParams<S>,
    pub conv2: ConvParams<S>,
}

#[derive(Clone, Copy, Debug)]
pub struct FebVars {
    pub conv1: ConvVars,
    pub conv2: ConvVars,
}

impl<S: Scalar> FebParams<S> {
    pub fn kaiming(c_in: usize, width: usize, rng: &mut ChaCha8Rng) -> Self {
        FebParams {
            conv1: ConvParams::kaiming(width, c_in, 3, rng),
            conv2: ConvParams::kaiming(width, width, 3, rng),
        }
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, S>) -> FebVars {
        FebVars {
            conv1: self.conv1.bind(tape),
            conv2: self.conv2.bind(tape),
        }
    }
}

/// Mutual-attention fusion parameters: two shape-preserving 1x1
/// pre-convolutions and the squeeze layer mapping the pooled 2C vector down
/// to a C-channel attention vector.
#[derive(Clone, Debug)]
pub struct MafeParams<S> {
    pub pre_d: ConvParams<S>,
    pub pre_er: ConvParams<S>,
    pub squeeze: LinearParams<S>,
}

#[derive(Clone, Copy, Debug)]
pub struct MafeVars {
    pub pre_d: ConvVars,
    pub pre_er: ConvVars,
    pub squeeze: LinearVars,
}

impl<S: Scalar> MafeParams<S> {
    pub fn kaiming(width: usize, rng: &mut ChaCha8Rng) -> Self {
        MafeParams {
            pre_d: ConvParams::kaiming(width, width, 1, rng),
            pre_er: ConvParams::kaiming(width, width, 1, rng),
            squeeze: LinearParams::kaiming(width, 2 * width, rng),
        }
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, S>) -> MafeVars {
        MafeVars {
            pre_d: self.pre_d.bind(tape),
            pre_er: self.pre_er.bind(tape),
            squeeze: self.squeeze.bind(tape),
        }
    }
}

/// Bottleneck fusion: a single 1x1 convolution from 2C concatenated
/// channels back down to C.
#[derive(Clone, Debug)]
pub struct BottleneckParams<S> {
    pub fuse: ConvParams<S>,
}

#[derive(Clone, Copy, Debug)]
pub struct BottleneckVars {
    pub fuse: ConvVars,
}

impl<S: Scalar> BottleneckParams<S> {
    pub fn kaiming(width: usize, rng: &mut ChaCha8Rng) -> Self {
        BottleneckParams {
            fuse: ConvParams::kaiming(width, 2 * width, 1, rng),
        }
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, S>) -> BottleneckVars {
        BottleneckVars {
            fuse: self.fuse.bind(tape),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionKind {
    /// No auxiliary branch: the no-reference baseline.
    None,
    Cosine,
    Bottleneck,
    Mafe,
}

impl FusionKind {
    pub const ALL: [FusionKind; 4] = [
        FusionKind::None,
        FusionKind::Cosine,
        FusionKind::Bottleneck,
        FusionKind::Mafe,
    ];

    pub fn tag(self) -> u8 {
        match self {
            FusionKind::None => 0,
            FusionKind::Cosine => 1,
            FusionKind::Bottleneck => 2,
            FusionKind::Mafe => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(FusionKind::None),
            1 => Some(FusionKind::Cosine),
            2 => Some(FusionKind::Bottleneck),
            3 => Some(FusionKind::Mafe),
            _ => None,
        }
    }

    pub fn uses_reference(self) -> bool {
        self != FusionKind::None
    }
}

impl std::fmt::Display for FusionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FusionKind::None => "none",
            FusionKind::Cosine => "cosine",
            FusionKind::Bottleneck => "bottleneck",
            FusionKind::Mafe => "mafe",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for FusionKind {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self, NetError> {
        match s {
            "none" => Ok(FusionKind::None),
            "cosine" => Ok(FusionKind::Cosine),
            "bottleneck" => Ok(FusionKind::Bottleneck),
            "mafe" => Ok(FusionKind::Mafe),
            other => Err(NetError::UnknownFusionKind(other.to_string())),
        }
    }
}

/// Per-stage fusion parameters; variant fixed by the model's fusion kind.
#[derive(Clone, Debug)]
pub enum FusionParams<S> {
    None,
    Cosine,
    Bottleneck(BottleneckParams<S>),
    Mafe(MafeParams<S>),
}

#[derive(Clone, Copy, Debug)]
pub enum FusionVars {
    None,
    Cosine,
    Bottleneck(BottleneckVars),
    Mafe(MafeVars),
}

impl<S: Scalar> FusionParams<S> {
    pub fn new(kind: FusionKind, width: usize, rng: &mut ChaCha8Rng) -> Self {
        match kind {
            FusionKind::None => FusionParams::None,
            FusionKind::Cosine => FusionParams::Cosine,
            FusionKind::Bottleneck => FusionParams::Bottleneck(BottleneckParams::kaiming(width, rng)),
            FusionKind::Mafe => FusionParams::Mafe(MafeParams::kaiming(width, rng)),
        }
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, S>) -> FusionVars {
        match self {
            FusionParams::None => FusionVars::None,
            FusionParams::Cosine => FusionVars::Cosine,
            FusionParams::Bottleneck(p) => FusionVars::Bottleneck(p.bind(tape)),
            FusionParams::Mafe(p) => FusionVars::Mafe(p.bind(tape)),
        }
    }
}
