//! Pointwise k-omega SST closure (Menter, Kuntz & Langtry 2003 constants).

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurbulenceConstants {
    pub sigma_k1: f64,
    pub sigma_k2: f64,
    pub sigma_w1: f64,
    pub sigma_w2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub beta_star: f64,
    pub a1: f64,
    /// Production limiter factor `c1` in `min(P_k, c1 * beta_star * k * omega)`.
    pub production_limit: f64,
    /// Floor applied to the cross-diffusion term inside `arg1`.
    pub cd_floor: f64,
}

impl TurbulenceConstants {
    pub fn sst_2003() -> Self {
        Self {
            sigma_k1: 0.85,
            sigma_k2: 1.0,
            sigma_w1: 0.5,
            sigma_w2: 0.856,
            beta1: 0.075,
            beta2: 0.0828,
            gamma1: 5.0 / 9.0,
            gamma2: 0.44,
            beta_star: 0.09,
            a1: 0.31,
            production_limit: 10.0,
            cd_floor: 1e-10,
        }
    }

    /// Wilcox (1988) k-omega expressed in the same structure: inner set only.
    pub fn wilcox_1988() -> Self {
        Self {
            sigma_k1: 0.5,
            sigma_k2: 0.5,
            sigma_w1: 0.5,
            sigma_w2: 0.5,
            beta1: 0.075,
            beta2: 0.075,
            gamma1: 5.0 / 9.0,
            gamma2: 5.0 / 9.0,
            beta_star: 0.09,
            a1: 0.31,
            production_limit: f64::INFINITY,
            cd_floor: 1e-10,
        }
    }

    pub fn all_positive(&self) -> bool {
        [
            self.sigma_k1,
            self.sigma_k2,
            self.sigma_w1,
            self.sigma_w2,
            self.beta1,
            self.beta2,
            self.gamma1,
            self.gamma2,
            self.beta_star,
            self.a1,
            self.production_limit,
            self.cd_floor,
        ]
        .iter()
        .all(|&c| c > 0.0)
    }

    pub fn blend(&self, f1: f64, inner: f64, outer: f64) -> f64 {
        f1 * inner + (1.0 - f1) * outer
    }

    pub fn sigma_k(&self, f1: f64) -> f64 {
        self.blend(f1, self.sigma_k1, self.sigma_k2)
    }

    pub fn sigma_w(&self, f1: f64) -> f64 {
        self.blend(f1, self.sigma_w1, self.sigma_w2)
    }

    pub fn beta(&self, f1: f64) -> f64 {
        self.blend(f1, self.beta1, self.beta2)
    }

    pub fn gamma(&self, f1: f64) -> f64 {
        self.blend(f1, self.gamma1, self.gamma2)
    }
}

/// Local inputs of the blending functions.
#[derive(Debug, Clone, Copy)]
pub struct BlendInputs {
    pub k: f64,
    pub omega: f64,
    pub nu: f64,
    pub wall_distance: f64,
    /// `grad k . grad omega`
    pub grad_k_dot_grad_w: f64,
}

/// `CD_kw = max(2 sigma_w2 / omega * grad k . grad omega, floor)`.
pub fn cross_diffusion(c: &TurbulenceConstants, b: &BlendInputs) -> f64 {
    (2.0 * c.sigma_w2 / b.omega * b.grad_k_dot_grad_w).max(c.cd_floor)
}

pub fn f1(c: &TurbulenceConstants, b: &BlendInputs) -> f64 {
    let d = b.wall_distance;
    let sk = b.k.max(0.0).sqrt();
    let cd = cross_diffusion(c, b);
    let arg1 = (sk / (c.beta_star * b.omega * d))
        .max(500.0 * b.nu / (d * d * b.omega))
        .min(4.0 * c.sigma_w2 * b.k.max(0.0) / (cd * d * d));
    arg1.powi(4).tanh()
}

pub fn f2(c: &TurbulenceConstants, b: &BlendInputs) -> f64 {
    let d = b.wall_distance;
    let sk = b.k.max(0.0).sqrt();
    let arg2 = (2.0 * sk / (c.beta_star * b.omega * d)).max(500.0 * b.nu / (d * d * b.omega));
    (arg2 * arg2).tanh()
}

/// SST eddy viscosity `a1 k / max(a1 omega, S F2)`; `strain` is
/// `sqrt(2 S_ij S_ij)`.
pub fn eddy_viscosity(c: &TurbulenceConstants, k: f64, omega: f64, strain: f64, f2: f64) -> f64 {
    let k = k.max(0.0);
    c.a1 * k / (c.a1 * omega).max(strain * f2)
}

/// Limited turbulence production `min(nu_t S^2, c1 beta* k omega)`.
pub fn k_production(c: &TurbulenceConstants, nu_t: f64, strain: f64, k: f64, omega: f64) -> f64 {
    (nu_t * strain * strain).min(c.production_limit * c.beta_star * k.max(0.0) * omega)
}

/// Uncorrected omega production density `gamma / nu_t * G` with `G = nu_t S^2`,
/// which reduces to `gamma S^2`.
pub fn omega_production(c: &TurbulenceConstants, f1: f64, strain: f64) -> f64 {
    c.gamma(f1) * strain * strain
}

/// Low-Re omega value imposed in wall-adjacent cells, `6 nu / (beta1 d^2)`.
pub fn wall_omega(c: &TurbulenceConstants, nu: f64, d: f64) -> f64 {
    6.0 * nu / (c.beta1 * d * d)
}
