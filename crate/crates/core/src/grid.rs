//! Discrete velocity space: truncated Cartesian nodes with midpoint weights,
//! Gauss-Legendre x uniform-azimuth quadrature on the unit sphere, and the
//! moment machinery shared by all kinetic modules.

use crate::error::{Error, Result};

/// Fluid state (rho, u, T) parameterizing a local Maxwellian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluidState {
    pub rho: f64,
    pub u: [f64; 3],
    pub temp: f64,
}

impl FluidState {
    pub fn new(rho: f64, u: [f64; 3], temp: f64) -> Result<Self> {
        if !(rho.is_finite() && rho > 0.0) {
            return Err(Error::State(format!("rho must be > 0, got {rho}")));
        }
        if !(temp.is_finite() && temp > 0.0) {
            return Err(Error::State(format!("T must be > 0, got {temp}")));
        }
        if u.iter().any(|c| !c.is_finite()) {
            return Err(Error::State("velocity must be finite".into()));
        }
        Ok(Self { rho, u, temp })
    }

    pub fn standard() -> Self {
        Self {
            rho: 1.0,
            u: [0.0; 3],
            temp: 1.0,
        }
    }
}

/// Truncated Cartesian velocity grid with midpoint weights plus a sphere
/// quadrature for the collision angle.
///
/// Nodes sit at `-v_max + (i + 1/2) h` per axis, so an even `n_per_axis`
/// keeps every node off the v3 = 0 plane and the set is closed under
/// `v -> -v` and coordinate permutations.
#[derive(Debug, Clone)]
pub struct VelocityGrid {
    pub n_per_axis: usize,
    pub v_max: f64,
    /// Cell width per axis.
    pub h: f64,
    axis: Vec<f64>,
    nodes: Vec<[f64; 3]>,
    weights: Vec<f64>,
    sphere_nodes: Vec<[f64; 3]>,
    sphere_weights: Vec<f64>,
}

/// Polynomial-in-v moment weight, degree at most 4.
#[derive(Debug, Clone, Copy)]
pub enum MomentWeight {
    One,
    /// v_i, axis in 0..3
    V(usize),
    /// |v|^2
    AbsV2,
    /// (v - u)_i
    Centered(usize, [f64; 3]),
    /// |v - u|^2
    CenteredAbsV2([f64; 3]),
    /// v1^p v2^q v3^r with p + q + r <= 4
    Monomial([u8; 3]),
}

impl MomentWeight {
    fn eval(&self, v: [f64; 3]) -> f64 {
        match *self {
            MomentWeight::One => 1.0,
            MomentWeight::V(i) => v[i],
            MomentWeight::AbsV2 => v[0] * v[0] + v[1] * v[1] + v[2] * v[2],
            MomentWeight::Centered(i, u) => v[i] - u[i],
            MomentWeight::CenteredAbsV2(u) => {
                let c = [v[0] - u[0], v[1] - u[1], v[2] - u[2]];
                c[0] * c[0] + c[1] * c[1] + c[2] * c[2]
            }
            MomentWeight::Monomial(p) => {
                v[0].powi(p[0] as i32) * v[1].powi(p[1] as i32) * v[2].powi(p[2] as i32)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            MomentWeight::V(i) | MomentWeight::Centered(i, _) if i >= 3 => {
                Err(Error::Grid(format!("axis index {i} out of range")))
            }
            MomentWeight::Monomial(p) => {
                let deg = p[0] as u32 + p[1] as u32 + p[2] as u32;
                if deg > 4 {
                    Err(Error::Grid(format!(
                        "monomial degree {deg} exceeds supported maximum 4"
                    )))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// Builds the velocity grid. `n_sphere` must have the form `2 k^2`
/// (k Gauss-Legendre nodes in cos(theta) times 2k uniform azimuths).
pub fn build_grid(n_per_axis: usize, v_max: f64, n_sphere: usize) -> Result<VelocityGrid> {
    if n_per_axis < 2 || n_per_axis % 2 != 0 {
        return Err(Error::Grid(format!(
            "n_per_axis must be even and >= 2, got {n_per_axis}"
        )));
    }
    if !(v_max.is_finite() && v_max > 0.0) {
        return Err(Error::Grid(format!("v_max must be > 0, got {v_max}")));
    }
    let k = ((n_sphere as f64) / 2.0).sqrt().round() as usize;
    if k == 0 || 2 * k * k != n_sphere {
        return Err(Error::Grid(format!(
            "n_sphere must be of the form 2k^2 (8, 18, 32, 50, ...), got {n_sphere}"
        )));
    }

    let n = n_per_axis;
    let h = 2.0 * v_max / n as f64;
    // Centered form keeps the axis bitwise symmetric under negation.
    let axis: Vec<f64> = (0..n)
        .map(|i| (i as f64 + 0.5 - n as f64 / 2.0) * h)
        .collect();

    let mut nodes = Vec::with_capacity(n * n * n);
    for &a in &axis {
        for &b in &axis {
            for &c in &axis {
                nodes.push([a, b, c]);
            }
        }
    }
    let w = h * h * h;
    let weights = vec![w; nodes.len()];

    // Product rule on S^2: Gauss-Legendre in mu = cos(theta), uniform in phi.
    let (mu, wmu) = legendre_rule(k);
    let n_phi = 2 * k;
    let wphi = 2.0 * std::f64::consts::PI / n_phi as f64;
    let mut sphere_nodes = Vec::with_capacity(n_sphere);
    let mut sphere_weights = Vec::with_capacity(n_sphere);
    for i in 0..k {
        let s = (1.0 - mu[i] * mu[i]).max(0.0).sqrt();
        for j in 0..n_phi {
            let phi = (j as f64 + 0.5) * wphi;
            sphere_nodes.push([s * phi.cos(), s * phi.sin(), mu[i]]);
            sphere_weights.push(wmu[i] * wphi);
        }
    }

    Ok(VelocityGrid {
        n_per_axis: n,
        v_max,
        h,
        axis,
        nodes,
        weights,
        sphere_nodes,
        sphere_weights,
    })
}

impl VelocityGrid {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[[f64; 3]] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Uniform cell volume (every weight equals this).
    pub fn cell_volume(&self) -> f64 {
        self.h * self.h * self.h
    }

    pub fn sphere_nodes(&self) -> &[[f64; 3]] {
        &self.sphere_nodes
    }

    pub fn sphere_weights(&self) -> &[f64] {
        &self.sphere_weights
    }

    pub fn axis(&self) -> &[f64] {
        &self.axis
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.n_per_axis + j) * self.n_per_axis + k
    }

    #[inline]
    pub fn node(&self, idx: usize) -> [f64; 3] {
        self.nodes[idx]
    }

    /// Index of -v for the node at `idx`.
    pub fn negated_index(&self, idx: usize) -> usize {
        let n = self.n_per_axis;
        let k = idx % n;
        let j = (idx / n) % n;
        let i = idx / (n * n);
        self.index(n - 1 - i, n - 1 - j, n - 1 - k)
    }

    /// Indices with v3 > 0 (the half incoming from the wall at x3 = 0).
    pub fn positive_v3_indices(&self) -> impl Iterator<Item = usize> + '_ {
        let n = self.n_per_axis;
        (0..self.len()).filter(move |idx| idx % n >= n / 2)
    }

    /// Indices with v3 < 0 (outgoing toward the wall).
    pub fn negative_v3_indices(&self) -> impl Iterator<Item = usize> + '_ {
        let n = self.n_per_axis;
        (0..self.len()).filter(move |idx| idx % n < n / 2)
    }

    pub fn maxwellian(&self, s: &FluidState) -> Vec<f64> {
        let pref = s.rho / (2.0 * std::f64::consts::PI * s.temp).powf(1.5);
        self.nodes
            .iter()
            .map(|v| {
                let c = [v[0] - s.u[0], v[1] - s.u[1], v[2] - s.u[2]];
                let q = c[0] * c[0] + c[1] * c[1] + c[2] * c[2];
                pref * (-q / (2.0 * s.temp)).exp()
            })
            .collect()
    }

    pub fn sqrt_maxwellian(&self, s: &FluidState) -> Vec<f64> {
        self.maxwellian(s).iter().map(|m| m.sqrt()).collect()
    }

    /// Quadrature sum of `phi(v) f(v)`.
    pub fn moment(&self, f: &[f64], weight: MomentWeight) -> Result<f64> {
        weight.validate()?;
        debug_assert_eq!(f.len(), self.len());
        let w = self.cell_volume();
        let mut acc = 0.0;
        for (idx, &fi) in f.iter().enumerate() {
            acc += weight.eval(self.nodes[idx]) * fi;
        }
        Ok(acc * w)
    }

    /// (mass, momentum, energy) = (int F, int v F, int |v|^2/2 F).
    pub fn conserved_moments(&self, f: &[f64]) -> (f64, [f64; 3], f64) {
        let w = self.cell_volume();
        let mut m0 = 0.0;
        let mut m1 = [0.0; 3];
        let mut m2 = 0.0;
        for (idx, &fi) in f.iter().enumerate() {
            let v = self.nodes[idx];
            m0 += fi;
            m1[0] += v[0] * fi;
            m1[1] += v[1] * fi;
            m1[2] += v[2] * fi;
            m2 += (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]) * fi;
        }
        (
            m0 * w,
            [m1[0] * w, m1[1] * w, m1[2] * w],
            0.5 * m2 * w,
        )
    }

    /// Sum over {v3 > 0} of v3 f(v) (flux of the half entering the domain).
    pub fn incoming_flux(&self, f: &[f64]) -> f64 {
        let w = self.cell_volume();
        let mut acc = 0.0;
        for idx in self.positive_v3_indices() {
            acc += self.nodes[idx][2] * f[idx];
        }
        acc * w
    }

    /// Sum over {v3 < 0} of |v3| f(v) (flux of the half leaving toward the wall).
    pub fn outgoing_flux(&self, f: &[f64]) -> f64 {
        let w = self.cell_volume();
        let mut acc = 0.0;
        for idx in self.negative_v3_indices() {
            acc += (-self.nodes[idx][2]) * f[idx];
        }
        acc * w
    }

    /// Full signed wall-normal flux, sum of v3 f over all nodes.
    pub fn signed_flux(&self, f: &[f64]) -> f64 {
        let w = self.cell_volume();
        let mut acc = 0.0;
        for (idx, &fi) in f.iter().enumerate() {
            acc += self.nodes[idx][2] * fi;
        }
        acc * w
    }

    /// L2 norm in v with the quadrature weights.
    pub fn norm_l2(&self, f: &[f64]) -> f64 {
        let w = self.cell_volume();
        (f.iter().map(|x| x * x).sum::<f64>() * w).sqrt()
    }

    /// Weighted L2 norm, weight values per node.
    pub fn norm_l2_weighted(&self, f: &[f64], weight: &[f64]) -> f64 {
        let w = self.cell_volume();
        (f.iter()
            .zip(weight)
            .map(|(x, wt)| x * x * wt)
            .sum::<f64>()
            * w)
            .sqrt()
    }

    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        let w = self.cell_volume();
        f.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() * w
    }

    /// Tricubic (4-point Lagrange per axis, exact for cubics) interpolation
    /// of a node field at an arbitrary velocity; zero outside the cube.
    pub fn interp_tricubic(&self, f: &[f64], v: [f64; 3]) -> f64 {
        let n = self.n_per_axis as isize;
        if n < 4 {
            return 0.0;
        }
        let mut base = [0usize; 3];
        let mut wx = [[0.0f64; 4]; 3];
        for ax in 0..3 {
            // Position in node-index coordinates; nodes sit at 0..n-1 and the
            // cube faces at -0.5 and n-0.5.
            let t = (v[ax] + self.v_max) / self.h - 0.5;
            if !(-0.5..=(n as f64 - 0.5)).contains(&t) {
                return 0.0;
            }
            let b = ((t.floor() as isize) - 1).clamp(0, n - 4);
            base[ax] = b as usize;
            let xi = t - b as f64;
            wx[ax] = [
                -(xi - 1.0) * (xi - 2.0) * (xi - 3.0) / 6.0,
                xi * (xi - 2.0) * (xi - 3.0) / 2.0,
                -xi * (xi - 1.0) * (xi - 3.0) / 2.0,
                xi * (xi - 1.0) * (xi - 2.0) / 6.0,
            ];
        }
        let mut acc = 0.0;
        for a in 0..4 {
            for b in 0..4 {
                let wij = wx[0][a] * wx[1][b];
                for c in 0..4 {
                    acc += wij
                        * wx[2][c]
                        * f[self.index(base[0] + a, base[1] + b, base[2] + c)];
                }
            }
        }
        acc
    }

    /// 4th-order central gradient of a node field along one velocity axis,
    /// one-sided (2nd order) at the truncation faces.
    pub fn gradient_axis(&self, f: &[f64], ax: usize) -> Vec<f64> {
        let n = self.n_per_axis;
        let stride = match ax {
            0 => n * n,
            1 => n,
            _ => 1,
        };
        let h = self.h;
        let mut out = vec![0.0; f.len()];
        for idx in 0..f.len() {
            let pos = match ax {
                0 => idx / (n * n),
                1 => (idx / n) % n,
                _ => idx % n,
            };
            out[idx] = if pos >= 2 && pos + 2 < n {
                (-f[idx + 2 * stride] + 8.0 * f[idx + stride] - 8.0 * f[idx - stride]
                    + f[idx - 2 * stride])
                    / (12.0 * h)
            } else if pos == 0 {
                (-3.0 * f[idx] + 4.0 * f[idx + stride] - f[idx + 2 * stride]) / (2.0 * h)
            } else if pos == n - 1 {
                (3.0 * f[idx] - 4.0 * f[idx - stride] + f[idx - 2 * stride]) / (2.0 * h)
            } else if pos == 1 {
                (f[idx + stride] - f[idx - stride]) / (2.0 * h)
            } else {
                (f[idx + stride] - f[idx - stride]) / (2.0 * h)
            };
        }
        out
    }
}

/// Gauss-Legendre nodes and weights on [-1, 1] by Newton iteration.
pub fn legendre_rule(k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; k];
    let mut weights = vec![0.0; k];
    for i in 0..k {
        // Chebyshev-based initial guess.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (k as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_eval(k, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_eval(k, x);
        nodes[k - 1 - i] = x;
        weights[k - 1 - i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

fn legendre_eval(k: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if k == 0 {
        return (1.0, 0.0);
    }
    for j in 2..=k {
        let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
        p0 = p1;
        p1 = p2;
    }
    let dp = k as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}
