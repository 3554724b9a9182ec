//! Implicit Runge–Kutta–Gauss (collocation) steps with dense output.

use nalgebra::SVector;

use crate::error::{Error, Result};

/// Butcher tableau of an `s`-stage Gauss method.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussTableau {
    pub c: Vec<f64>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl GaussTableau {
    /// Tableau for `s = 1, 2, 3` stages (orders 2, 4, 6).
    pub fn new(stages: usize) -> Result<Self> {
        let r3 = 3f64.sqrt();
        let r15 = 15f64.sqrt();
        match stages {
            1 => Ok(Self { c: vec![0.5], a: vec![vec![0.5]], b: vec![1.0] }),
            2 => Ok(Self {
                c: vec![0.5 - r3 / 6.0, 0.5 + r3 / 6.0],
                a: vec![vec![0.25, 0.25 - r3 / 6.0], vec![0.25 + r3 / 6.0, 0.25]],
                b: vec![0.5, 0.5],
            }),
            3 => Ok(Self {
                c: vec![0.5 - r15 / 10.0, 0.5, 0.5 + r15 / 10.0],
                a: vec![
                    vec![5.0 / 36.0, 2.0 / 9.0 - r15 / 15.0, 5.0 / 36.0 - r15 / 30.0],
                    vec![5.0 / 36.0 + r15 / 24.0, 2.0 / 9.0, 5.0 / 36.0 - r15 / 24.0],
                    vec![5.0 / 36.0 + r15 / 30.0, 2.0 / 9.0 + r15 / 15.0, 5.0 / 36.0],
                ],
                b: vec![5.0 / 18.0, 4.0 / 9.0, 5.0 / 18.0],
            }),
            _ => Err(Error::InvalidElements(format!("unsupported number of Gauss stages: {stages}"))),
        }
    }

    pub fn stages(&self) -> usize {
        self.c.len()
    }

    pub fn order(&self) -> usize {
        2 * self.c.len()
    }

    /// Lagrange basis polynomial `ℓ_j` on the nodes, evaluated at `θ`.
    fn lagrange(&self, j: usize, theta: f64) -> f64 {
        let mut v = 1.0;
        for (m, cm) in self.c.iter().enumerate() {
            if m != j {
                v *= (theta - cm) / (self.c[j] - cm);
            }
        }
        v
    }

    /// `∫₀^θ ℓ_j`, exact by Gauss–Legendre on `s` nodes.
    fn lagrange_integral(&self, j: usize, theta: f64) -> f64 {
        // The integrand has degree s-1, so an s-point rule on [0, θ] is exact.
        self.c.iter().zip(&self.b).map(|(cm, bm)| bm * theta * self.lagrange(j, cm * theta)).sum()
    }
}

/// Settings of the stage iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageSettings {
    /// Convergence threshold on the stage increment `h·ΔK`, relative to
    /// `max(1, |y|∞)` per component scale.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for StageSettings {
    fn default() -> Self {
        Self { tol: 1e-12, max_iter: 50 }
    }
}

/// One accepted collocation step; the collocation polynomial gives dense
/// output on `[t0, t0 + h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussStep<const D: usize> {
    pub t0: f64,
    pub h: f64,
    pub y0: SVector<f64, D>,
    pub y1: SVector<f64, D>,
    /// Stage derivatives `K_i = f(t0 + c_i h, Y_i)`.
    pub k: Vec<SVector<f64, D>>,
    pub iterations: usize,
    pub tableau: GaussTableau,
}

impl<const D: usize> GaussStep<D> {
    pub fn t1(&self) -> f64 {
        self.t0 + self.h
    }

    /// Collocation polynomial at `t0 + θh`.
    pub fn dense(&self, theta: f64) -> SVector<f64, D> {
        let mut y = self.y0;
        for (j, kj) in self.k.iter().enumerate() {
            y += kj * (self.h * self.tableau.lagrange_integral(j, theta));
        }
        y
    }

    /// Time derivative of the collocation polynomial at `t0 + θh`.
    pub fn dense_derivative(&self, theta: f64) -> SVector<f64, D> {
        let mut y = SVector::<f64, D>::zeros();
        for (j, kj) in self.k.iter().enumerate() {
            y += kj * self.tableau.lagrange(j, theta);
        }
        y
    }

    /// Dense output at absolute time `t`.
    pub fn at(&self, t: f64) -> SVector<f64, D> {
        self.dense((t - self.t0) / self.h)
    }

    /// Whether `t` lies on this step (endpoints included).
    pub fn contains(&self, t: f64) -> bool {
        let (lo, hi) = if self.h >= 0.0 { (self.t0, self.t1()) } else { (self.t1(), self.t0) };
        (lo..=hi).contains(&t)
    }
}

/// Take one Gauss step of size `h` from `(t0, y0)` for `ẏ = f(t, y)`.
///
/// Stages are solved by fixed-point iteration started from `guess` when
/// given (for instance the previous step's collocation polynomial), else
/// from `f(t0, y0)`.
pub fn gauss_step<const D: usize, F>(
    tableau: &GaussTableau,
    settings: &StageSettings,
    t0: f64,
    y0: &SVector<f64, D>,
    h: f64,
    guess: Option<&[SVector<f64, D>]>,
    mut f: F,
) -> Result<GaussStep<D>>
where
    F: FnMut(f64, &SVector<f64, D>) -> Result<SVector<f64, D>>,
{
    let s = tableau.stages();
    let mut k: Vec<SVector<f64, D>> = match guess {
        Some(g) if g.len() == s => g.to_vec(),
        _ => {
            let f0 = f(t0, y0)?;
            vec![f0; s]
        }
    };
    let scale = y0.amax().max(1.0);
    let mut residual = f64::INFINITY;
    for it in 1..=settings.max_iter {
        let mut next = Vec::with_capacity(s);
        for i in 0..s {
            let mut yi = *y0;
            for (j, kj) in k.iter().enumerate() {
                yi += kj * (h * tableau.a[i][j]);
            }
            next.push(f(t0 + tableau.c[i] * h, &yi)?);
        }
        residual = next.iter().zip(&k).map(|(n, o)| ((n - o) * h).amax()).fold(0.0, f64::max) / scale;
        k = next;
        if residual <= settings.tol {
            let mut y1 = *y0;
            for (j, kj) in k.iter().enumerate() {
                y1 += kj * (h * tableau.b[j]);
            }
            return Ok(GaussStep { t0, h, y0: *y0, y1, k, iterations: it, tableau: tableau.clone() });
        }
    }
    Err(Error::StageNonConvergence { t: t0, residual })
}

/// Stage guess for a step of size `h_next` following `prev`, from the
/// extrapolated collocation polynomial.
pub fn extrapolated_guess<const D: usize>(prev: &GaussStep<D>, h_next: f64) -> Vec<SVector<f64, D>> {
    prev.tableau.c.iter().map(|ci| prev.dense_derivative(1.0 + ci * h_next / prev.h)).collect()
}

/// Step-doubling estimate: one step of `h` against two of `h/2`. Returns
/// the two-half-step result and the estimated local error of the full
/// step.
pub fn step_doubling<const D: usize, F>(
    tableau: &GaussTableau,
    settings: &StageSettings,
    t0: f64,
    y0: &SVector<f64, D>,
    h: f64,
    mut f: F,
) -> Result<(GaussStep<D>, GaussStep<D>, f64)>
where
    F: FnMut(f64, &SVector<f64, D>) -> Result<SVector<f64, D>>,
{
    let full = gauss_step(tableau, settings, t0, y0, h, None, &mut f)?;
    let first = gauss_step(tableau, settings, t0, y0, 0.5 * h, None, &mut f)?;
    let second = gauss_step(tableau, settings, t0 + 0.5 * h, &first.y1, 0.5 * h, None, &mut f)?;
    let p = tableau.order() as i32;
    let err = (full.y1 - second.y1).amax() / (2f64.powi(p) - 1.0);
    Ok((first, second, err))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector2;

    type V1 = SVector<f64, 1>;

    #[test]
    fn stability_function_of_two_stages() {
        let tab = GaussTableau::new(2).unwrap();
        let s = StageSettings { tol: 1e-15, max_iter: 200 };
        for &z in &[-0.5, -0.1, 0.2, 0.4] {
            let step = gauss_step(&tab, &s, 0.0, &V1::new(1.0), 1.0, None, |_, y| Ok(y * z)).unwrap();
            let r = (1.0 + z / 2.0 + z * z / 12.0) / (1.0 - z / 2.0 + z * z / 12.0);
            assert!((step.y1[0] - r).abs() < 1e-14, "z = {z}");
        }
    }

    #[test]
    fn fourth_order_convergence() {
        let tab = GaussTableau::new(2).unwrap();
        let s = StageSettings::default();
        let exact = |t: f64| Vector2::new(t.cos(), -t.sin());
        let run = |n: usize| {
            let h = 2.0 / n as f64;
            let mut y = Vector2::new(1.0, 0.0);
            for i in 0..n {
                y = gauss_step(&tab, &s, i as f64 * h, &y, h, None, |_, y| Ok(Vector2::new(y[1], -y[0]))).unwrap().y1;
            }
            (y - exact(2.0)).norm()
        };
        let ratio = run(8) / run(16);
        assert!((ratio - 16.0).abs() < 0.2 * 16.0, "ratio {ratio}");
    }

    #[test]
    fn dense_output_interpolates_stages_and_ends() {
        let tab = GaussTableau::new(3).unwrap();
        let s = StageSettings::default();
        let step = gauss_step(&tab, &s, 1.0, &V1::new(2.0), 0.3, None, |t, y| Ok(y * t.sin())).unwrap();
        assert!((step.dense(0.0) - step.y0).amax() < 1e-15);
        assert!((step.dense(1.0) - step.y1).amax() < 1e-14);
        for (i, ci) in tab.c.iter().enumerate() {
            assert!((step.dense_derivative(*ci) - step.k[i]).amax() < 1e-13);
        }
    }

    #[test]
    fn zero_field_leaves_state_unchanged() {
        let tab = GaussTableau::new(2).unwrap();
        let y0 = SVector::<f64, 4>::new(0.1, 0.05, 1.0, 2.0);
        let step =
            gauss_step(&tab, &StageSettings::default(), 0.0, &y0, 365.25, None, |_, _| Ok(SVector::zeros())).unwrap();
        assert_eq!(step.y1, y0);
    }

    #[test]
    fn step_doubling_error_is_sixth_order_for_three_stages() {
        let tab = GaussTableau::new(3).unwrap();
        let s = StageSettings { tol: 1e-15, max_iter: 100 };
        let f = |_: f64, y: &V1| Ok(V1::new(-y[0] * y[0]));
        let (_, _, e1) = step_doubling(&tab, &s, 0.0, &V1::new(1.0), 0.4, f).unwrap();
        let (_, _, e2) = step_doubling(&tab, &s, 0.0, &V1::new(1.0), 0.2, f).unwrap();
        let ratio = e1 / e2;
        assert!(ratio > 60.0 && ratio < 200.0, "ratio {ratio}");
    }
}
