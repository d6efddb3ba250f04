//! Real spherical harmonics through band 2 and Lambertian SH shading.

use crate::error::{Error, Result};
use crate::model::{Lighting, Vec3};

pub const C0: f64 = 0.282095;
pub const C1: f64 = 0.488603;
pub const C2: f64 = 1.092548;
pub const C20: f64 = 0.315392;
pub const C22: f64 = 0.546274;

/// Allowed deviation of a normal's length from 1.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Basis values in the order
/// `[1, y, z, x, xy, yz, 3z²−1, xz, x²−y²]` (each with its constant).
pub fn sh_basis(n: Vec3) -> Result<[f64; 9]> {
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    if !((len - 1.0).abs() <= UNIT_TOLERANCE) {
        return Err(Error::Precondition(format!(
            "normal {n:?} has length {len}, expected 1"
        )));
    }
    Ok(sh_basis_unchecked(n))
}

pub(crate) fn sh_basis_unchecked([x, y, z]: Vec3) -> [f64; 9] {
    [
        C0,
        C1 * y,
        C1 * z,
        C1 * x,
        C2 * x * y,
        C2 * y * z,
        C20 * (3.0 * z * z - 1.0),
        C2 * x * z,
        C22 * (x * x - y * y),
    ]
}

/// `albedo ⊙ Σ_k I_k H_k(n)`, unclamped.
pub fn shade(albedo: Vec3, normal: Vec3, lighting: &Lighting) -> Result<Vec3> {
    Ok(shade_basis(albedo, &sh_basis(normal)?, lighting))
}

pub(crate) fn shade_basis(albedo: Vec3, h: &[f64; 9], lighting: &Lighting) -> Vec3 {
    let mut irr = [0.0; 3];
    for (hk, ik) in h.iter().zip(&lighting.0) {
        for c in 0..3 {
            irr[c] += ik[c] * hk;
        }
    }
    [albedo[0] * irr[0], albedo[1] * irr[1], albedo[2] * irr[2]]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_unit() {
        assert!(sh_basis([0.0, 0.0, 1.1]).is_err());
        assert!(sh_basis([0.0, 0.0, 1.0 + 5e-7]).is_ok());
        assert!(sh_basis([f64::NAN, 0.0, 1.0]).is_err());
    }
}
