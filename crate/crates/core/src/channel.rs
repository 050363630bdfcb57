//! Noise channels: generate per-edge observations from ground truth and
//! calibrate the signal parameter lambda with `E{Y_xy | theta} = lambda *
//! theta_x^{-1} theta_y`.
//!
//! Three channels are supported:
//!
//! - `Z2Flip(p)` — binary symmetric channel on signs; lambda = 1 - 2p
//!   exactly.
//! - `OrthGaussian(m, sigma, project)` — the group difference plus sigma *
//!   iid Gaussian noise, optionally projected back onto O(m); lambda has
//!   no closed form and is estimated by Monte Carlo.
//! - `U1Multiplicative(density)` — multiplicative angular noise from one of
//!   three smooth positive densities; lambda = E[cos Z] by quadrature.
//!
//! Observation draws are keyed by `(seed, edge index)` so generation is
//! order-independent and parallelizable.

use crate::grid::GridGraph;
use crate::group::{
    haar_sample, polar_project, GroupElement, GroupVariant, RawMatrix,
};
use crate::rng::{self, tag};
use crate::stats::RunningMoments;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};
use thiserror::Error;

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum DensitySpec {
    /// Wrapped normal with the given (unwrapped) standard deviation.
    WrappedGaussian { width: f64 },
    /// Von Mises with the given concentration.
    VonMises { concentration: f64 },
    /// Haar density `eps + (1 - eps)(1 + cos t)`; the infimum is exactly
    /// `eps` and `eps = 1` is the uniform (pure-noise) channel.
    UniformMixture { eps: f64 },
}

impl DensitySpec {
    pub fn validate(&self) -> Result<(), ChannelError> {
        let ok = match self {
            DensitySpec::WrappedGaussian { width } => *width > 0.0 && width.is_finite(),
            DensitySpec::VonMises { concentration } => {
                *concentration >= 0.0 && concentration.is_finite()
            }
            DensitySpec::UniformMixture { eps } => *eps > 0.0 && *eps <= 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(ChannelError::BadDensity(*self))
        }
    }

    /// Density with respect to the Haar probability measure on U(1),
    /// i.e. `2*pi` times the Lebesgue density on `[0, 2*pi)`.
    pub fn haar_pdf(&self, t: f64) -> f64 {
        TAU * self.pdf(t)
    }

    /// Lebesgue density on `[0, 2*pi)`, normalized to integrate to 1.
    pub fn pdf(&self, t: f64) -> f64 {
        match self {
            DensitySpec::WrappedGaussian { width } => {
                let mut t = t % TAU;
                if t > PI {
                    t -= TAU;
                }
                // wrap enough replicas to cover ~8 standard deviations
                let k_max = (8.0 * width / TAU).ceil() as i64 + 1;
                let mut acc = 0.0;
                for k in -k_max..=k_max {
                    let x = t + k as f64 * TAU;
                    acc += (-x * x / (2.0 * width * width)).exp();
                }
                acc / (width * (2.0 * PI).sqrt())
            }
            DensitySpec::VonMises { concentration } => {
                (concentration * t.cos()).exp() / (TAU * bessel_i0(*concentration))
            }
            DensitySpec::UniformMixture { eps } => {
                (eps + (1.0 - eps) * (1.0 + t.cos())) / TAU
            }
        }
    }

    /// Infimum of the Haar density over the circle.
    pub fn haar_pdf_infimum(&self) -> f64 {
        match self {
            DensitySpec::UniformMixture { eps } => *eps,
            // both remaining families have their minimum at t = pi
            _ => self.haar_pdf(PI),
        }
    }

    /// Sample an angle from the density.
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match self {
            DensitySpec::WrappedGaussian { width } => {
                let z: f64 = rng.sample(StandardNormal);
                (z * width).rem_euclid(TAU)
            }
            DensitySpec::VonMises { concentration } => {
                // Best-Fisher rejection sampler
                let kappa = *concentration;
                if kappa < 1e-10 {
                    return rng.gen::<f64>() * TAU;
                }
                let tau_c = 1.0 + (1.0 + 4.0 * kappa * kappa).sqrt();
                let rho = (tau_c - (2.0 * tau_c).sqrt()) / (2.0 * kappa);
                let r = (1.0 + rho * rho) / (2.0 * rho);
                loop {
                    let u1: f64 = rng.gen();
                    let z = (PI * u1).cos();
                    let f = (1.0 + r * z) / (r + z);
                    let c = kappa * (r - f);
                    let u2: f64 = rng.gen();
                    if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
                        let u3: f64 = rng.gen();
                        let sign = if u3 > 0.5 { 1.0 } else { -1.0 };
                        return (sign * f.acos()).rem_euclid(TAU);
                    }
                }
            }
            DensitySpec::UniformMixture { eps } => {
                if rng.gen::<f64>() < *eps {
                    rng.gen::<f64>() * TAU
                } else {
                    // density (1 + cos t)/(2 pi): rejection against uniform
                    loop {
                        let t = rng.gen::<f64>() * TAU;
                        if rng.gen::<f64>() * 2.0 <= 1.0 + t.cos() {
                            return t;
                        }
                    }
                }
            }
        }
    }
}

/// Modified Bessel function of the first kind, order zero, by power series.
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut acc = 1.0;
    for k in 1..200 {
        term *= q / ((k * k) as f64);
        acc += term;
        if term < 1e-16 * acc {
            break;
        }
    }
    acc
}

/// Order one, used by tests as the closed-form von Mises lambda.
#[cfg(test)]
pub(crate) fn bessel_i1(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = x / 2.0;
    let mut acc = term;
    for k in 1..200 {
        term *= q / ((k * (k + 1)) as f64);
        acc += term;
        if term < 1e-16 * acc {
            break;
        }
    }
    acc
}

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(tag = "channel", rename_all = "kebab-case")]
pub enum ChannelSpec {
    Z2Flip { p: f64 },
    OrthGaussian { m: usize, sigma: f64, project: bool },
    U1Multiplicative { density: DensitySpec },
}

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("flip probability must lie in [0, 1/2), got {0}")]
    BadFlipProbability(f64),
    #[error("sigma must be finite and >= 0, got {0}")]
    BadSigma(f64),
    #[error("matrix dimension must be >= 1")]
    BadDimension,
    #[error("invalid density parameters: {0:?}")]
    BadDensity(DensitySpec),
    #[error("channel {channel} does not produce {variant} observations")]
    VariantMismatch { channel: String, variant: GroupVariant },
    #[error("Monte Carlo budget {0} below the minimum of 100 samples")]
    BudgetTooSmall(usize),
    #[error("observations are raw matrices; project them before group ops")]
    RawObservations,
}

impl ChannelSpec {
    pub fn validate(&self) -> Result<(), ChannelError> {
        match self {
            ChannelSpec::Z2Flip { p } => {
                if !(0.0..0.5).contains(p) {
                    return Err(ChannelError::BadFlipProbability(*p));
                }
            }
            ChannelSpec::OrthGaussian { m, sigma, .. } => {
                if *m == 0 {
                    return Err(ChannelError::BadDimension);
                }
                if !sigma.is_finite() || *sigma < 0.0 {
                    return Err(ChannelError::BadSigma(*sigma));
                }
            }
            ChannelSpec::U1Multiplicative { density } => density.validate()?,
        }
        Ok(())
    }

    pub fn variant(&self) -> GroupVariant {
        match self {
            ChannelSpec::Z2Flip { .. } => GroupVariant::Z2,
            ChannelSpec::OrthGaussian { m, .. } => GroupVariant::Orth(*m),
            ChannelSpec::U1Multiplicative { .. } => GroupVariant::U1,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TruthMode {
    HaarRandom,
    AllIdentity,
}

/// Flat per-index storage of group elements (or raw matrices).
#[derive(Clone, Debug, PartialEq)]
pub enum ElementArray {
    Signs(Vec<i8>),
    Angles(Vec<f64>),
    Matrices(Vec<DMatrix<f64>>),
}

impl ElementArray {
    pub fn len(&self) -> usize {
        match self {
            ElementArray::Signs(v) => v.len(),
            ElementArray::Angles(v) => v.len(),
            ElementArray::Matrices(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ground truth, observations and channel metadata for one experiment.
#[derive(Clone, Debug)]
pub struct Instance {
    pub graph: GridGraph,
    pub channel: ChannelSpec,
    pub truth_mode: TruthMode,
    pub seed: u64,
    pub truth: ElementArray,
    /// One entry per edge; raw matrices when the channel has
    /// `project = false`.
    pub observations: ElementArray,
    /// False exactly when observations are unprojected raw matrices.
    pub observations_in_group: bool,
}

impl Instance {
    pub fn variant(&self) -> GroupVariant {
        self.channel.variant()
    }

    pub fn truth_element(&self, v: usize) -> GroupElement {
        match &self.truth {
            ElementArray::Signs(s) => GroupElement::Z2(s[v]),
            ElementArray::Angles(a) => GroupElement::U1(a[v]),
            ElementArray::Matrices(m) => GroupElement::Orth(m[v].clone()),
        }
    }

    /// The group difference `theta_x^{-1} theta_y` an edge observes.
    pub fn truth_difference(&self, edge: usize) -> GroupElement {
        let (x, y) = self.graph.edge_endpoints(edge);
        self.truth_element(x)
            .inverse()
            .compose(&self.truth_element(y))
            .expect("truth elements share a variant")
    }

    /// Observation as a group element; raw matrices are polar-projected,
    /// which is the standard preprocessing for the path estimators.
    pub fn observation_element(&self, edge: usize) -> GroupElement {
        match &self.observations {
            ElementArray::Signs(s) => GroupElement::Z2(s[edge]),
            ElementArray::Angles(a) => GroupElement::U1(a[edge]),
            ElementArray::Matrices(m) => {
                if self.observations_in_group {
                    GroupElement::Orth(m[edge].clone())
                } else {
                    GroupElement::Orth(polar_project(&m[edge]).0)
                }
            }
        }
    }

    pub fn observation_raw(&self, edge: usize) -> RawMatrix {
        match &self.observations {
            ElementArray::Signs(s) => DMatrix::from_element(1, 1, s[edge] as f64),
            ElementArray::Angles(a) => GroupElement::U1(a[edge]).to_matrix(),
            ElementArray::Matrices(m) => m[edge].clone(),
        }
    }

    /// Fraction of edges whose observation equals the exact truth
    /// difference (Z2 channels).
    pub fn edge_agreement_rate(&self) -> Option<f64> {
        let (ElementArray::Signs(obs), ElementArray::Signs(truth)) =
            (&self.observations, &self.truth)
        else {
            return None;
        };
        let n = self.graph.edge_count();
        let mut agree = 0usize;
        for e in 0..n {
            let (x, y) = self.graph.edge_endpoints(e);
            if obs[e] == truth[x] * truth[y] {
                agree += 1;
            }
        }
        Some(agree as f64 / n as f64)
    }

    /// Gauge transform: truth `theta_x -> theta_x tau_x^{-1}` with
    /// observations `Y_xy -> tau_x Y_xy tau_y^{-1}`. Used by the gauge
    /// covariance tests.
    pub fn gauge_transform(&self, tau: &[GroupElement]) -> Instance {
        assert_eq!(tau.len(), self.graph.vertex_count());
        let mut out = self.clone();
        out.truth = match &self.truth {
            ElementArray::Signs(s) => ElementArray::Signs(
                s.iter()
                    .enumerate()
                    .map(|(v, &x)| x * tau[v].sign().unwrap())
                    .collect(),
            ),
            ElementArray::Angles(a) => ElementArray::Angles(
                a.iter()
                    .enumerate()
                    .map(|(v, &x)| {
                        GroupElement::u1(x - tau[v].angle().unwrap())
                            .angle()
                            .unwrap()
                    })
                    .collect(),
            ),
            ElementArray::Matrices(m) => ElementArray::Matrices(
                m.iter()
                    .enumerate()
                    .map(|(v, x)| x * tau[v].inverse().to_matrix())
                    .collect(),
            ),
        };
        let n = self.graph.edge_count();
        out.observations = match &self.observations {
            ElementArray::Signs(s) => ElementArray::Signs(
                (0..n)
                    .map(|e| {
                        let (x, y) = self.graph.edge_endpoints(e);
                        s[e] * tau[x].sign().unwrap() * tau[y].sign().unwrap()
                    })
                    .collect(),
            ),
            ElementArray::Angles(a) => ElementArray::Angles(
                (0..n)
                    .map(|e| {
                        let (x, y) = self.graph.edge_endpoints(e);
                        GroupElement::u1(
                            a[e] + tau[x].angle().unwrap() - tau[y].angle().unwrap(),
                        )
                        .angle()
                        .unwrap()
                    })
                    .collect(),
            ),
            ElementArray::Matrices(m) => ElementArray::Matrices(
                (0..n)
                    .map(|e| {
                        let (x, y) = self.graph.edge_endpoints(e);
                        tau[x].to_matrix() * &m[e] * tau[y].inverse().to_matrix()
                    })
                    .collect(),
            ),
        };
        out
    }
}

/// Draw ground truth and per-edge observations. Deterministic given
/// `(seed, graph, channel)`; each edge has its own counter-derived stream,
/// so the result does not depend on evaluation order.
pub fn generate_instance(
    graph: &GridGraph,
    channel: ChannelSpec,
    truth_mode: TruthMode,
    seed: u64,
) -> Result<Instance, ChannelError> {
    channel.validate()?;
    let n_vertices = graph.vertex_count();
    let n_edges = graph.edge_count();
    let variant = channel.variant();

    let truth = match (variant, truth_mode) {
        (GroupVariant::Z2, TruthMode::AllIdentity) => ElementArray::Signs(vec![1; n_vertices]),
        (GroupVariant::U1, TruthMode::AllIdentity) => ElementArray::Angles(vec![0.0; n_vertices]),
        (GroupVariant::Orth(m), TruthMode::AllIdentity) => {
            ElementArray::Matrices(vec![DMatrix::identity(m, m); n_vertices])
        }
        (GroupVariant::Z2, TruthMode::HaarRandom) => ElementArray::Signs(
            (0..n_vertices)
                .into_par_iter()
                .map(|v| {
                    let mut r = rng::stream(seed, tag::TRUTH, v as u64);
                    if r.gen::<bool>() {
                        1
                    } else {
                        -1
                    }
                })
                .collect(),
        ),
        (GroupVariant::U1, TruthMode::HaarRandom) => ElementArray::Angles(
            (0..n_vertices)
                .into_par_iter()
                .map(|v| {
                    let mut r = rng::stream(seed, tag::TRUTH, v as u64);
                    r.gen::<f64>() * TAU
                })
                .collect(),
        ),
        (GroupVariant::Orth(m), TruthMode::HaarRandom) => ElementArray::Matrices(
            (0..n_vertices)
                .into_par_iter()
                .map(|v| {
                    let mut r = rng::stream(seed, tag::TRUTH, v as u64);
                    haar_sample(GroupVariant::Orth(m), &mut r).to_matrix()
                })
                .collect(),
        ),
    };

    let mut observations_in_group = true;
    let observations = match channel {
        ChannelSpec::Z2Flip { p } => {
            let ElementArray::Signs(t) = &truth else { unreachable!() };
            ElementArray::Signs(
                (0..n_edges)
                    .into_par_iter()
                    .map(|e| {
                        let mut r = rng::stream(seed, tag::OBSERVATION, e as u64);
                        let (x, y) = graph.edge_endpoints(e);
                        let clean = t[x] * t[y];
                        if r.gen::<f64>() < p {
                            -clean
                        } else {
                            clean
                        }
                    })
                    .collect(),
            )
        }
        ChannelSpec::U1Multiplicative { density } => {
            let ElementArray::Angles(t) = &truth else { unreachable!() };
            ElementArray::Angles(
                (0..n_edges)
                    .into_par_iter()
                    .map(|e| {
                        let mut r = rng::stream(seed, tag::OBSERVATION, e as u64);
                        let (x, y) = graph.edge_endpoints(e);
                        let z = density.sample(&mut r);
                        (t[y] - t[x] + z).rem_euclid(TAU)
                    })
                    .collect(),
            )
        }
        ChannelSpec::OrthGaussian { m, sigma, project } => {
            let ElementArray::Matrices(t) = &truth else { unreachable!() };
            observations_in_group = project;
            ElementArray::Matrices(
                (0..n_edges)
                    .into_par_iter()
                    .map(|e| {
                        let mut r = rng::stream(seed, tag::OBSERVATION, e as u64);
                        let (x, y) = graph.edge_endpoints(e);
                        let clean = t[x].transpose() * &t[y];
                        let noisy = if sigma == 0.0 {
                            clean
                        } else {
                            let z = DMatrix::from_fn(m, m, |_, _| {
                                r.sample::<f64, _>(StandardNormal)
                            });
                            clean + z * sigma
                        };
                        if project {
                            polar_project(&noisy).0
                        } else {
                            noisy
                        }
                    })
                    .collect(),
            )
        }
    };

    Ok(Instance {
        graph: graph.clone(),
        channel,
        truth_mode,
        seed,
        truth,
        observations,
        observations_in_group,
    })
}

/// How a lambda value was obtained.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum LambdaMethod {
    ClosedForm,
    MonteCarlo { n_samples: usize, stderr: f64 },
    Quadrature,
}

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct LambdaEstimate {
    pub value: f64,
    pub method: LambdaMethod,
}

/// The unbiasedness coefficient of a channel. Z2 is exact, U(1) is
/// quadrature over the noise density, O(m) is Monte Carlo of
/// `(1/m) tr E[P(I + sigma Z)]` with a reported standard error.
pub fn lambda_for_channel(
    channel: &ChannelSpec,
    mc_samples: usize,
    seed: u64,
) -> Result<LambdaEstimate, ChannelError> {
    channel.validate()?;
    match channel {
        ChannelSpec::Z2Flip { p } => Ok(LambdaEstimate {
            value: 1.0 - 2.0 * p,
            method: LambdaMethod::ClosedForm,
        }),
        ChannelSpec::U1Multiplicative { density } => {
            // lambda e^{i phi} = E e^{iZ}; symmetric families give phi = 0,
            // and the modulus is what the estimator divides by
            let re = quadrature_circle(|t| t.cos() * density.pdf(t));
            let im = quadrature_circle(|t| t.sin() * density.pdf(t));
            Ok(LambdaEstimate {
                value: (re * re + im * im).sqrt(),
                method: LambdaMethod::Quadrature,
            })
        }
        ChannelSpec::OrthGaussian { m, sigma, .. } => {
            if *sigma == 0.0 {
                return Ok(LambdaEstimate {
                    value: 1.0,
                    method: LambdaMethod::ClosedForm,
                });
            }
            if mc_samples < 100 {
                return Err(ChannelError::BudgetTooSmall(mc_samples));
            }
            let chunk = 1024usize;
            let n_chunks = mc_samples.div_ceil(chunk);
            let moments = (0..n_chunks)
                .into_par_iter()
                .map(|c| {
                    let mut r = rng::stream(seed, tag::TRIAL, c as u64);
                    let lo = c * chunk;
                    let hi = ((c + 1) * chunk).min(mc_samples);
                    let mut acc = RunningMoments::new();
                    for _ in lo..hi {
                        let z = DMatrix::from_fn(*m, *m, |_, _| {
                            r.sample::<f64, _>(StandardNormal)
                        });
                        let y = polar_project(&(DMatrix::identity(*m, *m) + z * *sigma)).0;
                        acc.push(y.trace() / *m as f64);
                    }
                    acc
                })
                .reduce(RunningMoments::new, |mut a, b| {
                    a.merge(&b);
                    a
                });
            Ok(LambdaEstimate {
                value: moments.mean(),
                method: LambdaMethod::MonteCarlo {
                    n_samples: mc_samples,
                    stderr: moments.stderr(),
                },
            })
        }
    }
}

/// Composite Simpson over `[0, 2*pi]` with interval doubling to relative
/// 1e-10; the integrands here are smooth and periodic.
pub(crate) fn quadrature_circle(f: impl Fn(f64) -> f64) -> f64 {
    let mut n = 64usize;
    let mut prev = simpson(&f, n);
    loop {
        n *= 2;
        let cur = simpson(&f, n);
        if (cur - prev).abs() <= 1e-10 * (1.0 + cur.abs()) || n >= 1 << 20 {
            return cur;
        }
        prev = cur;
    }
}

fn simpson(f: &impl Fn(f64) -> f64, n: usize) -> f64 {
    let h = TAU / n as f64;
    let mut acc = f(0.0) + f(TAU);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(k as f64 * h);
    }
    acc * h / 3.0
}

/// Empirical check of the unbiasedness identity: the mean of
/// `theta_x Y theta_y^{-1}` over fresh Haar pairs, with its deviation from
/// `lambda_hat * I`.
#[derive(Clone, Debug)]
pub struct UnbiasednessReport {
    pub mean: DMatrix<f64>,
    pub lambda_hat: f64,
    pub off_diagonal_max: f64,
    pub max_dev_from_lambda_i: f64,
    pub n_samples: usize,
    /// Standard error of a single matrix entry, for 3-sigma comparisons.
    pub entry_stderr: f64,
}

pub fn verify_unbiasedness(
    channel: &ChannelSpec,
    n_samples: usize,
    seed: u64,
) -> Result<UnbiasednessReport, ChannelError> {
    channel.validate()?;
    if n_samples < 1000 {
        return Err(ChannelError::BudgetTooSmall(n_samples));
    }
    let variant = channel.variant();
    let dim = variant.matrix_dim();
    let chunk = 2048usize;
    let n_chunks = n_samples.div_ceil(chunk);
    let (sum, sumsq) = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut r = rng::stream(seed, tag::TRIAL, c as u64);
            let lo = c * chunk;
            let hi = ((c + 1) * chunk).min(n_samples);
            let mut sum = DMatrix::zeros(dim, dim);
            let mut sumsq = 0.0;
            for _ in lo..hi {
                let tx = haar_sample(variant, &mut r);
                let ty = haar_sample(variant, &mut r);
                let diff = tx.inverse().compose(&ty).unwrap();
                let y: DMatrix<f64> = match channel {
                    ChannelSpec::Z2Flip { p } => {
                        let clean = diff.sign().unwrap();
                        let s = if r.gen::<f64>() < *p { -clean } else { clean };
                        DMatrix::from_element(1, 1, s as f64)
                    }
                    ChannelSpec::U1Multiplicative { density } => {
                        let z = density.sample(&mut r);
                        GroupElement::u1(diff.angle().unwrap() + z).to_matrix()
                    }
                    ChannelSpec::OrthGaussian { m, sigma, project } => {
                        let clean = diff.to_matrix();
                        let noisy = if *sigma == 0.0 {
                            clean
                        } else {
                            let z = DMatrix::from_fn(*m, *m, |_, _| {
                                r.sample::<f64, _>(StandardNormal)
                            });
                            clean + z * *sigma
                        };
                        if *project {
                            polar_project(&noisy).0
                        } else {
                            noisy
                        }
                    }
                };
                let aligned = tx.to_matrix() * y * ty.inverse().to_matrix();
                sumsq += aligned[(0, 0)] * aligned[(0, 0)];
                sum += aligned;
            }
            (sum, sumsq)
        })
        .reduce(
            || (DMatrix::zeros(dim, dim), 0.0),
            |(a, sa), (b, sb)| (a + b, sa + sb),
        );
    let mean = sum / n_samples as f64;
    let lambda_hat = mean.trace() / dim as f64;
    let mut off_diagonal_max: f64 = 0.0;
    let mut max_dev: f64 = 0.0;
    for i in 0..dim {
        for j in 0..dim {
            let target = if i == j { lambda_hat } else { 0.0 };
            let dev = (mean[(i, j)] - target).abs();
            max_dev = max_dev.max(dev);
            if i != j {
                off_diagonal_max = off_diagonal_max.max(mean[(i, j)].abs());
            }
        }
    }
    let var00 = (sumsq / n_samples as f64 - mean[(0, 0)] * mean[(0, 0)]).max(0.0);
    Ok(UnbiasednessReport {
        mean,
        lambda_hat,
        off_diagonal_max,
        max_dev_from_lambda_i: max_dev,
        n_samples,
        entry_stderr: (var00 / n_samples as f64).sqrt(),
    })
}
