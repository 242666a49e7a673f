//! Lightweight layer descriptors. Weights live in a [`Params`] store under
//! the layer's name prefix; descriptors only remember shapes and hand the
//! forward computation to the tape.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{ParamBinding, Params, Scalar, Tape, Var};
use crate::Result;

#[derive(Debug, Clone)]
pub struct LinearLayer {
    name: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl LinearLayer {
    pub fn init<T: Scalar>(
        params: &mut Params<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self>
    where
        StandardNormal: Distribution<T>,
    {
        let std = T::of_f64(1.0 / (d_in as f64).sqrt());
        params.insert(&format!("{name}.w"), super::NdTensor::randn(&[d_in, d_out], std, rng))?;
        params.insert(&format!("{name}.b"), super::NdTensor::zeros(&[d_out]))?;
        Ok(LinearLayer { name: name.to_string(), d_in, d_out })
    }

    /// Zero-initialized variant (identity-at-start output heads).
    pub fn init_zero<T: Scalar>(
        params: &mut Params<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        params.insert(&format!("{name}.w"), super::NdTensor::zeros(&[d_in, d_out]))?;
        params.insert(&format!("{name}.b"), super::NdTensor::zeros(&[d_out]))?;
        Ok(LinearLayer { name: name.to_string(), d_in, d_out })
    }

    /// x [N, d_in] -> [N, d_out]
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &ParamBinding<T>, x: Var) -> Result<Var> {
        let w = bind.var(&format!("{}.w", self.name));
        let b = bind.var(&format!("{}.b", self.name));
        let y = tape.matmul(x, w)?;
        tape.row_bias_add(y, b)
    }

    /// x [d_in] -> [d_out]
    pub fn forward_vec<T: Scalar>(&self, tape: &mut Tape<T>, bind: &ParamBinding<T>, x: Var) -> Result<Var> {
        let row = tape.reshape(x, &[1, self.d_in])?;
        let y = self.forward(tape, bind, row)?;
        tape.reshape(y, &[self.d_out])
    }
}

#[derive(Debug, Clone)]
pub struct Conv3dLayer {
    name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv3dLayer {
    pub fn init<T: Scalar>(
        params: &mut Params<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Result<Self>
    where
        StandardNormal: Distribution<T>,
    {
        let fan_in = c_in * k * k * k;
        let std = T::of_f64(1.0 / (fan_in as f64).sqrt());
        params.insert(&format!("{name}.w"), super::NdTensor::randn(&[c_out, c_in, k, k, k], std, rng))?;
        params.insert(&format!("{name}.b"), super::NdTensor::zeros(&[c_out]))?;
        Ok(Conv3dLayer { name: name.to_string(), c_in, c_out, k, stride, padding })
    }

    pub fn init_zero<T: Scalar>(
        params: &mut Params<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        params.insert(&format!("{name}.w"), super::NdTensor::zeros(&[c_out, c_in, k, k, k]))?;
        params.insert(&format!("{name}.b"), super::NdTensor::zeros(&[c_out]))?;
        Ok(Conv3dLayer { name: name.to_string(), c_in, c_out, k, stride, padding })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &ParamBinding<T>, x: Var) -> Result<Var> {
        let w = bind.var(&format!("{}.w", self.name));
        let b = bind.var(&format!("{}.b", self.name));
        let y = tape.conv3d(x, w, self.stride, self.padding)?;
        tape.channel_bias_add(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNormLayer {
    name: String,
    pub channels: usize,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNormLayer {
    pub fn init<T: Scalar>(
        params: &mut Params<T>,
        name: &str,
        channels: usize,
        groups: usize,
        eps: f64,
    ) -> Result<Self> {
        params.insert(&format!("{name}.gamma"), super::NdTensor::full(&[channels], T::one()))?;
        params.insert(&format!("{name}.beta"), super::NdTensor::zeros(&[channels]))?;
        Ok(GroupNormLayer { name: name.to_string(), channels, groups, eps })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &ParamBinding<T>, x: Var) -> Result<Var> {
        let gamma = bind.var(&format!("{}.gamma", self.name));
        let beta = bind.var(&format!("{}.beta", self.name));
        tape.group_norm(x, self.groups, gamma, beta, T::of_f64(self.eps))
    }
}

/// Two-layer perceptron with SiLU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub l1: LinearLayer,
    pub l2: LinearLayer,
}

impl Mlp {
    pub fn init<T: Scalar>(
        params: &mut Params<T>,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self>
    where
        StandardNormal: Distribution<T>,
    {
        Ok(Mlp {
            l1: LinearLayer::init(params, &format!("{name}.l1"), d_in, d_hidden, rng)?,
            l2: LinearLayer::init(params, &format!("{name}.l2"), d_hidden, d_out, rng)?,
        })
    }

    /// Variant whose output layer starts at zero (FiLM heads start as
    /// identity modulation once a constant bias is added downstream).
    pub fn init_zero_out<T: Scalar>(
        params: &mut Params<T>,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self>
    where
        StandardNormal: Distribution<T>,
    {
        Ok(Mlp {
            l1: LinearLayer::init(params, &format!("{name}.l1"), d_in, d_hidden, rng)?,
            l2: LinearLayer::init_zero(params, &format!("{name}.l2"), d_hidden, d_out)?,
        })
    }

    pub fn forward_vec<T: Scalar>(&self, tape: &mut Tape<T>, bind: &ParamBinding<T>, x: Var) -> Result<Var> {
        let h = self.l1.forward_vec(tape, bind, x)?;
        let h = tape.silu(h);
        self.l2.forward_vec(tape, bind, h)
    }
}
