//! Named groups of learnable tensors.

use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

/// A set of learnable tensors with stable, hierarchical names.
pub trait ParamGroup: Clone {
    fn named(&self) -> Vec<(String, &Tensor)>;
    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    /// A copy whose tensors are leaves on `tape`.
    fn bind(&self, tape: &Tape) -> Self {
        let mut bound = self.clone();
        for (_, t) in bound.named_mut() {
            *t = tape.leaf(t);
        }
        bound
    }

    fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Implements [`ParamGroup`] for a struct of `Tensor` and `Option<Tensor>`
/// fields.
#[macro_export]
macro_rules! param_group {
    ($ty:ty { $($field:ident),* $(,)? } $(optional { $($opt:ident),* $(,)? })?) => {
        impl $crate::params::ParamGroup for $ty {
            fn named(&self) -> Vec<(String, &$crate::tensor::Tensor)> {
                #[allow(unused_mut)]
                let mut out = vec![$((stringify!($field).to_string(), &self.$field)),*];
                $($(
                    if let Some(t) = &self.$opt {
                        out.push((stringify!($opt).to_string(), t));
                    }
                )*)?
                out
            }

            fn named_mut(&mut self) -> Vec<(String, &mut $crate::tensor::Tensor)> {
                #[allow(unused_mut)]
                let mut out = vec![$((stringify!($field).to_string(), &mut self.$field)),*];
                $($(
                    if let Some(t) = &mut self.$opt {
                        out.push((stringify!($opt).to_string(), t));
                    }
                )*)?
                out
            }
        }
    };
}

pub fn prefixed<'a>(prefix: &str, items: Vec<(String, &'a Tensor)>) -> impl Iterator<Item = (String, &'a Tensor)> + 'a {
    let prefix = prefix.to_string();
    items.into_iter().map(move |(n, t)| (format!("{prefix}.{n}"), t))
}

pub fn prefixed_mut<'a>(
    prefix: &str,
    items: Vec<(String, &'a mut Tensor)>,
) -> impl Iterator<Item = (String, &'a mut Tensor)> + 'a {
    let prefix = prefix.to_string();
    items.into_iter().map(move |(n, t)| (format!("{prefix}.{n}"), t))
}

/// Uniform initialization in `[-bound, bound)`.
pub fn uniform(rng: &mut Rng, shape: &[usize], bound: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_range(-bound, bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches generated length")
}

/// Initialization range for every weight table.
pub const INIT_BOUND: f32 = 0.05;
