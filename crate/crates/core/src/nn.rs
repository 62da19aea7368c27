//! Affine layers and small MLPs over parameters held in a [`ParameterStore`].

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{glorot, ParamId, ParameterStore};
use crate::tensor::{Activation, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Affine {
    pub fn register(
        store: &mut ParameterStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), glorot(rng, fan_in, fan_out))?;
        let bias = if with_bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[1, fan_out]))?)
        } else {
            None
        };
        Ok(Affine { weight, bias })
    }

    pub fn from_names(store: &ParameterStore, weight: &str, bias: Option<&str>) -> Result<Self> {
        Ok(Affine {
            weight: store.id(weight)?,
            bias: bias.map(|b| store.id(b)).transpose()?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> {
        std::iter::once(self.weight).chain(self.bias)
    }
}

/// Affine layers with `activation` between them; the output layer is affine.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Affine>,
    pub activation: Activation,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`; layer `k` is named `{prefix}.{k}`.
    pub fn register(
        store: &mut ParameterStore,
        prefix: &str,
        dims: &[usize],
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| Affine::register(store, &format!("{prefix}.{k}"), w[0], w[1], true, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Mlp { layers, activation })
    }

    /// Looks up `(weight, bias)` parameter names layer by layer.
    pub fn from_names(
        store: &ParameterStore,
        layers: &[(&str, &str)],
        activation: Activation,
    ) -> Result<Self> {
        let layers = layers
            .iter()
            .map(|(w, b)| Affine::from_names(store, w, Some(b)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Mlp { layers, activation })
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len().saturating_sub(1);
        for (k, layer) in self.layers.iter().enumerate() {
            h = layer.apply(tape, store, h)?;
            if k < last {
                h = tape.activation(h, self.activation)?;
            }
        }
        Ok(h)
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(Affine::params)
    }
}

/// Applies the MLP whose layers are named by `(weight, bias)` pairs.
pub fn mlp_apply(
    tape: &mut Tape,
    store: &ParameterStore,
    x: Var,
    layers: &[(&str, &str)],
    activation: Activation,
) -> Result<Var> {
    Mlp::from_names(store, layers, activation)?.apply(tape, store, x)
}
