//! The multivariate FPCA Gaussian likelihood fragment.
//!
//! The factor `p(x | nu, zeta, sigma_eps^2)` sends one message to every
//! coefficient vector `nu^(j)`, every score vector `zeta_i` and every noise
//! variance. All three families are linear in the moment cache, so a message
//! set is computed from one cache snapshot.
//!
//! The Kronecker structure `E(zeta~ zeta~') ⊗ C'C` is never formed per
//! subject: each `(a, b)` block of the summed precision is a weighted sum of
//! the `C_i'C_i`, obtained for all blocks at once as one matrix product.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::expfam::{GaussianForm, GaussianNatural, InvChiSqNatural};
use crate::model::{refresh_moments, Designs, MomentCache, VariationalState, SLOT_EPS};

/// Messages from the likelihood factor to its neighbours.
#[derive(Debug, Clone, PartialEq)]
pub struct FragmentMessages {
    /// Per variable, vec form.
    pub to_nu: Vec<GaussianNatural>,
    /// Per subject, vech form.
    pub to_zeta: Vec<GaussianNatural>,
    /// Per variable.
    pub to_sigma_eps: Vec<InvChiSqNatural>,
}

fn check(cache: &MomentCache, designs: &Designs, j: Option<usize>, i: Option<usize>) -> Result<()> {
    if cache.nu.len() != designs.p() || cache.zeta.len() != designs.n {
        return Err(Error::Shape(format!(
            "cache covers {} variables / {} subjects, designs {} / {}",
            cache.nu.len(),
            cache.zeta.len(),
            designs.p(),
            designs.n
        )));
    }
    if let Some(j) = j {
        if j >= designs.p() || cache.nu[j].d != designs.blocks[j].d {
            return Err(Error::Shape(format!("variable index {j} does not match the designs")));
        }
    }
    if let Some(i) = i {
        if i >= designs.n {
            return Err(Error::Shape(format!("subject index {i} out of range")));
        }
    }
    Ok(())
}

/// Message to `nu^(j)`:
/// `eta1 = s sum_i E(zeta~_i) ⊗ C_i'x_i`, `eta2 = -s/2 sum_i vec(E(zeta~_i zeta~_i') ⊗ C_i'C_i)`
/// with `s = E(1/sigma_eps^2)`.
pub fn message_to_nu(cache: &MomentCache, designs: &Designs, j: usize) -> Result<GaussianNatural> {
    check(cache, designs, Some(j), None)?;
    let block = &designs.blocks[j];
    let (d, l1, n) = (block.d, cache.l + 1, designs.n);
    let s = cache.e_inv_sigma2[j][SLOT_EPS];

    let mut z_mean = DMatrix::zeros(n, l1);
    let mut z_second = DMatrix::zeros(n, l1 * l1);
    for (i, z) in cache.zeta.iter().enumerate() {
        z_mean.row_mut(i).copy_from(&z.tilde_mean.transpose());
        z_second.row_mut(i).copy_from_slice(z.tilde_second.as_slice());
    }
    // column a of cx * z_mean is block a of eta1
    let eta1 = DVector::from_column_slice((&block.cx * z_mean * s).as_slice());
    // column b (L+1) + a of g_stack' z_second is vec of precision block (a, b)
    let blocks = block.g_stack.tr_mul(&z_second) * s;
    let mut precision = DMatrix::zeros(l1 * d, l1 * d);
    for b in 0..l1 {
        for a in 0..l1 {
            let col = blocks.column(b * l1 + a);
            precision
                .view_mut((a * d, b * d), (d, d))
                .copy_from_slice(col.as_slice());
        }
    }
    Ok(GaussianNatural::from_precision(eta1, &precision, GaussianForm::Vec))
}

/// Message to `zeta_i`:
/// `eta1 = sum_j s_j (E(V_psi)'C'x - E h_mupsi)`, `eta2 = -1/2 sum_j s_j D_L' vec(E H_psi)`.
pub fn message_to_zeta(cache: &MomentCache, designs: &Designs, i: usize) -> Result<GaussianNatural> {
    check(cache, designs, None, Some(i))?;
    let l = cache.l;
    let mut eta1 = DVector::zeros(l);
    let mut precision = DMatrix::zeros(l, l);
    for j in 0..designs.p() {
        let s = cache.e_inv_sigma2[j][SLOT_EPS];
        let h = cache.h_matrix(j, i);
        let vcx = cache.vcx[j].column(i);
        for r in 0..l {
            eta1[r] += s * (vcx[r + 1] - h[(0, r + 1)]);
        }
        precision += h.view((1, 1), (l, l)) * s;
    }
    Ok(GaussianNatural::from_precision(eta1, &precision, GaussianForm::Vech))
}

/// Message to `sigma_eps^(j)2`: `(-N_j / 2, -1/2 sum_i E RSS_i)`.
pub fn message_to_sigma_eps(cache: &MomentCache, designs: &Designs, j: usize) -> Result<InvChiSqNatural> {
    check(cache, designs, Some(j), None)?;
    let rss: f64 = (0..designs.n).map(|i| cache.expected_rss(designs, j, i)).sum();
    Ok(InvChiSqNatural {
        eta1: -0.5 * designs.blocks[j].total as f64,
        eta2: -0.5 * rss,
    })
}

/// All messages from one cache snapshot.
pub fn fragment_messages(cache: &MomentCache, designs: &Designs) -> Result<FragmentMessages> {
    let p = designs.p();
    let to_nu = (0..p)
        .map(|j| message_to_nu(cache, designs, j))
        .collect::<Result<_>>()?;
    let to_sigma_eps = (0..p)
        .map(|j| message_to_sigma_eps(cache, designs, j))
        .collect::<Result<_>>()?;
    let to_zeta = (0..designs.n)
        .into_par_iter()
        .map(|i| message_to_zeta(cache, designs, i))
        .collect::<Result<_>>()?;
    Ok(FragmentMessages {
        to_nu,
        to_zeta,
        to_sigma_eps,
    })
}

/// Refreshes the moments of `state` once, then emits every message.
pub fn run_fragment(state: &VariationalState, designs: &Designs) -> Result<FragmentMessages> {
    let cache = refresh_moments(state, designs)?;
    fragment_messages(&cache, designs)
}
