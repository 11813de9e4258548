//! Parameterized building blocks shared by every stream.

use crate::autograd::{Graph, Var};
use crate::kernels::ConvGeom;
use crate::params::{ParamId, ParamRole, ParamStore};
use crate::tensor::{Shape, Tensor};
use rand::Rng;

/// How a layer's weights start out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Fan-in normal with standard deviation `gain * sqrt(2 / fan_in)`.
    Kaiming { gain: f64 },
    Zeros,
}

impl Init {
    pub const KAIMING: Init = Init::Kaiming { gain: 1.0 };

    fn sample<R: Rng + ?Sized>(self, shape: Shape, fan_in: usize, rng: &mut R) -> Tensor {
        match self {
            Init::Kaiming { gain } => Tensor::randn(shape, gain * (2.0 / fan_in as f64).sqrt(), rng),
            Init::Zeros => Tensor::zeros(shape),
        }
    }
}

/// Square-kernel convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub geom: ConvGeom,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        assert!(stride == 1 || stride == 2, "stride must be 1 or 2");
        let shape = Shape::new(out_channels, in_channels, kernel, kernel);
        let w = init.sample(shape, in_channels * kernel * kernel, rng);
        let weight = store.register(format!("{name}.weight"), w, ParamRole::Weight);
        let bias = store.register(
            format!("{name}.bias"),
            Tensor::zeros(Shape::new(1, out_channels, 1, 1)),
            ParamRole::Bias,
        );
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            geom: ConvGeom::same(kernel, stride),
        }
    }

    pub fn forward(&self, g: &Graph<'_>, x: Var) -> Var {
        g.conv2d(x, g.param(self.weight), Some(g.param(self.bias)), self.geom)
    }

    /// Sets the weight to a centre-tap identity over the first
    /// `out_channels` inputs and zeroes the bias.
    pub fn set_identity(&self, store: &mut ParamStore) {
        let k = self.geom.kernel;
        let mut w = Tensor::zeros(Shape::new(self.out_channels, self.in_channels, k, k));
        for o in 0..self.out_channels.min(self.in_channels) {
            w.set(o, o, k / 2, k / 2, 1.0);
        }
        store.set(self.weight, w).expect("identity shape");
        store
            .set(self.bias, Tensor::zeros(Shape::new(1, self.out_channels, 1, 1)))
            .expect("bias shape");
    }

    pub fn set_constant(&self, store: &mut ParamStore, weight: f64, bias: f64) {
        store.get_mut(self.weight).data_mut().fill(weight);
        store.get_mut(self.bias).data_mut().fill(bias);
    }
}

/// 3x3 transposed convolution; stride 2 doubles the spatial size.
#[derive(Clone, Debug)]
pub struct Deconv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl Deconv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let shape = Shape::new(in_channels, out_channels, 3, 3);
        let w = Init::KAIMING.sample(shape, in_channels * 9 / (stride * stride), rng);
        let weight = store.register(format!("{name}.weight"), w, ParamRole::Weight);
        let bias = store.register(
            format!("{name}.bias"),
            Tensor::zeros(Shape::new(1, out_channels, 1, 1)),
            ParamRole::Bias,
        );
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            stride,
        }
    }

    pub fn forward(&self, g: &Graph<'_>, x: Var) -> Var {
        g.conv_transpose2d(
            x,
            g.param(self.weight),
            Some(g.param(self.bias)),
            ConvGeom::same(3, self.stride),
            self.stride - 1,
        )
    }
}

/// Batch normalization with learned affine and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let shape = Shape::new(1, channels, 1, 1);
        Self {
            gamma: store.register(format!("{name}.gamma"), Tensor::full(shape, 1.0), ParamRole::Gamma),
            beta: store.register(format!("{name}.beta"), Tensor::zeros(shape), ParamRole::Beta),
            running_mean: store.register(format!("{name}.running_mean"), Tensor::zeros(shape), ParamRole::RunningMean),
            running_var: store.register(format!("{name}.running_var"), Tensor::full(shape, 1.0), ParamRole::RunningVar),
        }
    }

    pub fn forward(&self, g: &Graph<'_>, x: Var) -> Var {
        g.batch_norm(x, self.gamma, self.beta, (self.running_mean, self.running_var), BN_EPS)
    }
}

/// Conv followed by ReLU, the unit every encoder is built from.
#[derive(Clone, Debug)]
pub struct ConvRelu(pub Conv2d);

impl ConvRelu {
    pub fn forward(&self, g: &Graph<'_>, x: Var) -> Var {
        g.relu(self.0.forward(g, x))
    }
}
