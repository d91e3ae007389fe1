use std::collections::BTreeMap;

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Momentum step over every trainable array: `v = mu*v - rate*g; w += v`.
/// Frozen arrays and their velocities are left alone even when `grads`
/// carries an entry for them.
pub fn sgd_momentum_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &BTreeMap<String, Vec<T>>,
    rate: f64,
    momentum: f64,
) -> Result<()> {
    let names: Vec<String> = store
        .names()
        .filter(|n| store.is_trainable(n))
        .map(str::to_string)
        .collect();
    if let Some(missing) = names.iter().find(|n| !grads.contains_key(*n)) {
        return Err(Error::MissingGradient(missing.clone()));
    }
    let (rate, mu) = (T::from_f64(rate), T::from_f64(momentum));
    for n in &names {
        store.momentum_update(n, &grads[n], rate, mu)?;
    }
    Ok(())
}
