//! Symmetric in-batch contrastive loss over two views per user.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// InfoNCE over `B x d` view blocks `first` and `second`, row `u` of each
/// belonging to user `u`.
///
/// With `S = cos(first_u, second_v) / tau`, user `u` contributes
/// `-S_uu + logsumexp_{v != u} S_uv` and `-S_uu + logsumexp_{v != u} S_vu`.
/// The positive pair is kept out of both denominators, so the loss can go
/// below zero once positives dominate. The result is the mean over users.
pub fn infonce_loss(g: &mut Graph, first: Var, second: Var, tau: f64) -> Result<Var> {
    let (b, d) = g.shape(first);
    if g.shape(second) != (b, d) {
        return Err(Error::dim(format!(
            "view blocks {:?} and {:?}",
            (b, d),
            g.shape(second)
        )));
    }
    if b < 2 {
        return Err(Error::contract(format!(
            "contrastive batch needs at least 2 users, got {b}"
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let a = g.normalize_rows(first)?;
    let c = g.normalize_rows(second)?;
    let ct = g.transpose(c)?;
    let sim = g.matmul(a, ct)?;
    let sim = g.scale(sim, 1.0 / tau)?;
    let sim_t = g.transpose(sim)?;
    let off_diag: Vec<bool> = (0..b * b).map(|i| i / b != i % b).collect();
    let pos = g.diag(sim)?;
    let row_lse = g.logsumexp_rows(sim, Some(off_diag.clone()))?;
    let col_lse = g.logsumexp_rows(sim_t, Some(off_diag))?;
    let both = g.add(row_lse, col_lse)?;
    let two_pos = g.scale(pos, 2.0)?;
    let per_user = g.sub(both, two_pos)?;
    g.mean(per_user)
}
