use super::{argmax, Router, ScoreMatrix};
use crate::autodiff::softmax_into;
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Multinomial logistic router: `scores(z) = W z + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearRouter {
    /// `[P x D]`.
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

impl LinearRouter {
    pub fn dim(&self) -> usize {
        self.weight.cols()
    }
}

impl Router for LinearRouter {
    fn num_paths(&self) -> usize {
        self.bias.len()
    }

    fn scores(&self, z: &[f64]) -> Vec<f64> {
        (0..self.bias.len())
            .map(|p| {
                self.weight
                    .row(p)
                    .iter()
                    .zip(z)
                    .map(|(w, x)| w * x)
                    .sum::<f64>()
                    + self.bias[p]
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRegConfig {
    pub l2: f64,
    pub grad_tol: f64,
    pub max_iters: usize,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        LogRegConfig {
            l2: 1e-4,
            grad_tol: 1e-6,
            max_iters: 5000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibrationConfig {
    pub tv_tol: f64,
    pub max_iters: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            tv_tol: 1e-3,
            max_iters: 200,
        }
    }
}

/// Marginal the calibrated router should reproduce on its fit features.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum TargetDist {
    #[default]
    ArgmaxLabels,
    Uniform,
    Custom(Vec<f64>),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DiscriminativeConfig {
    pub logreg: LogRegConfig,
    pub calibration: CalibrationConfig,
    pub target: TargetDist,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationReport {
    pub iterations: usize,
    pub total_variation: f64,
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct DiscriminativeFit {
    pub router: LinearRouter,
    pub uncalibrated: LinearRouter,
    pub labels: Vec<usize>,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Classes that received no label.
    pub empty_classes: Vec<usize>,
    pub calibration: CalibrationReport,
}

/// Best-scoring path per document, lowest index on ties.
pub fn argmax_labels(scores: &ScoreMatrix) -> Vec<usize> {
    (0..scores.docs())
        .map(|d| argmax(&scores.totals[d]))
        .collect()
}

/// Fraction of features routed to each path.
pub fn hard_marginal(router: &dyn Router, features: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; router.num_paths()];
    for z in features {
        m[router.route(z)] += 1.0;
    }
    let n = features.len().max(1) as f64;
    m.iter_mut().for_each(|x| *x /= n);
    m
}

fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

struct Standardized {
    x: Vec<f64>,
    mean: Vec<f64>,
    std: Vec<f64>,
}

fn standardize(features: &[Vec<f64>], dim: usize) -> Standardized {
    let n = features.len() as f64;
    let mut mean = vec![0.0; dim];
    for f in features {
        mean.iter_mut().zip(f).for_each(|(m, x)| *m += x / n);
    }
    let mut std = vec![0.0; dim];
    for f in features {
        std.iter_mut()
            .zip(f.iter().zip(&mean))
            .for_each(|(s, (x, m))| *s += (x - m) * (x - m) / n);
    }
    std.iter_mut().for_each(|s| *s = s.sqrt().max(1e-8));
    let mut x = Vec::with_capacity(features.len() * dim);
    for f in features {
        x.extend(
            f.iter()
                .zip(mean.iter().zip(&std))
                .map(|(v, (m, s))| (v - m) / s),
        );
    }
    Standardized { x, mean, std }
}

/// Objective value and gradient of mean cross-entropy plus `l2/2 |W|^2`
/// over parameters laid out as `[W (P x D) | b (P)]`.
fn objective(
    theta: &[f64],
    x: &[f64],
    labels: &[usize],
    n: usize,
    d: usize,
    p: usize,
    l2: f64,
    grad: &mut [f64],
) -> f64 {
    let (w, b) = theta.split_at(p * d);
    let mut logits = vec![0.0; n * p];
    gemm(n, d, p, 1.0, x, false, w, true, 0.0, &mut logits);
    let mut loss = 0.0;
    let mut probs = vec![0.0; p];
    for (r, &y) in labels.iter().enumerate() {
        let row = &mut logits[r * p..(r + 1) * p];
        row.iter_mut().zip(b).for_each(|(l, bi)| *l += bi);
        loss += softmax_into(row, &mut probs) - row[y];
        row.copy_from_slice(&probs);
        row[y] -= 1.0;
        row.iter_mut().for_each(|v| *v /= n as f64);
    }
    loss /= n as f64;
    let (gw, gb) = grad.split_at_mut(p * d);
    // dW = R^T X with R the residual matrix.
    gemm(p, n, d, 1.0, &logits, true, x, false, 0.0, gw);
    gb.iter_mut().for_each(|g| *g = 0.0);
    for r in 0..n {
        gb.iter_mut()
            .zip(&logits[r * p..(r + 1) * p])
            .for_each(|(g, v)| *g += v);
    }
    let mut reg = 0.0;
    for (g, wi) in gw.iter_mut().zip(w) {
        *g += l2 * wi;
        reg += wi * wi;
    }
    loss + 0.5 * l2 * reg
}

/// Multinomial logistic regression by accelerated full-batch gradient
/// descent on standardized features. Returns the router in the original
/// feature space, the iteration count and the final gradient norm.
pub fn fit_logistic(
    features: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    cfg: &LogRegConfig,
) -> Result<(LinearRouter, usize, f64)> {
    let n = features.len();
    if n == 0 || labels.len() != n {
        return Err(Error::Shape(format!(
            "{} features for {} labels",
            n,
            labels.len()
        )));
    }
    if num_classes == 0 || labels.iter().any(|&l| l >= num_classes) {
        return Err(Error::Routing("label outside the class range".into()));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("router features differ in dimension".into()));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("router features".into()));
    }
    let p = num_classes;
    let st = standardize(features, d);
    let mean_sq: f64 =
        st.x.chunks(d)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>() + 1.0)
            .sum::<f64>()
            / n as f64;
    let step = 1.0 / (0.5 * mean_sq + cfg.l2);

    let size = p * d + p;
    let mut theta = vec![0.0; size];
    let mut y = theta.clone();
    let mut grad = vec![0.0; size];
    let mut t = 1.0f64;
    let mut prev_loss = f64::INFINITY;
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    while iterations < cfg.max_iters {
        let loss_theta = objective(&theta, &st.x, labels, n, d, p, cfg.l2, &mut grad);
        grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if grad_norm < cfg.grad_tol {
            break;
        }
        if loss_theta > prev_loss {
            // Restart momentum when the objective goes up.
            y.copy_from_slice(&theta);
            t = 1.0;
        }
        prev_loss = loss_theta;
        iterations += 1;
        objective(&y, &st.x, labels, n, d, p, cfg.l2, &mut grad);
        let next: Vec<f64> = y.iter().zip(&grad).map(|(v, g)| v - step * g).collect();
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_next;
        for i in 0..size {
            y[i] = next[i] + beta * (next[i] - theta[i]);
        }
        theta = next;
        t = t_next;
    }

    // Fold the standardization into the weights.
    let (w, b) = theta.split_at(p * d);
    let mut weight = Tensor::zeros(&[p, d]);
    let mut bias = b.to_vec();
    for c in 0..p {
        let row = weight.row_mut(c);
        for j in 0..d {
            row[j] = w[c * d + j] / st.std[j];
            bias[c] -= row[j] * st.mean[j];
        }
    }
    Ok((LinearRouter { weight, bias }, iterations, grad_norm))
}

fn soft_marginal(router: &LinearRouter, features: &[Vec<f64>], temp: f64) -> Vec<f64> {
    let p = router.num_paths();
    let mut m = vec![0.0; p];
    let mut probs = vec![0.0; p];
    for z in features {
        let s: Vec<f64> = router.scores(z).iter().map(|v| v / temp).collect();
        softmax_into(&s, &mut probs);
        m.iter_mut().zip(&probs).for_each(|(a, b)| *a += b);
    }
    m.iter_mut().for_each(|x| *x /= features.len() as f64);
    m
}

/// Adjusts only the bias so the hard routing marginal over `features`
/// matches `target`. Proportional updates of the softmax marginal are
/// taken at a temperature that anneals toward hard assignment; the best
/// bias seen is kept.
pub fn calibrate_bias(
    router: &mut LinearRouter,
    features: &[Vec<f64>],
    target: &[f64],
    cfg: &CalibrationConfig,
) -> Result<CalibrationReport> {
    if target.len() != router.num_paths() {
        return Err(Error::Shape("calibration target length".into()));
    }
    let sum: f64 = target.iter().sum();
    if target.iter().any(|t| *t < 0.0 || !t.is_finite()) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(
            "calibration target must be a distribution".into(),
        ));
    }
    if features.is_empty() {
        return Err(Error::Routing("no features to calibrate on".into()));
    }
    // Logit spread sets the starting temperature.
    let spread = features
        .iter()
        .map(|z| {
            let s = router.scores(z);
            s.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                - s.iter().copied().fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / features.len() as f64;
    let t0 = spread.max(1e-3);
    let eps = 0.5 / features.len() as f64;

    let mut best_bias = router.bias.clone();
    let mut best_tv = total_variation(&hard_marginal(router, features), target);
    let mut iterations = 0;
    while iterations < cfg.max_iters && best_tv > cfg.tv_tol {
        let temp = (t0 * 0.97f64.powi(iterations as i32)).max(t0 * 1e-3);
        let soft = soft_marginal(router, features, temp);
        for ((b, &q), &s) in router.bias.iter_mut().zip(target).zip(&soft) {
            *b += temp * ((q + eps).ln() - (s + eps).ln());
        }
        iterations += 1;
        let tv = total_variation(&hard_marginal(router, features), target);
        if tv < best_tv {
            best_tv = tv;
            best_bias.clone_from(&router.bias);
        }
    }
    router.bias = best_bias;
    Ok(CalibrationReport {
        iterations,
        total_variation: best_tv,
        converged: best_tv <= cfg.tv_tol,
    })
}

/// Fits the linear router to argmax path labels of `scores`, then
/// calibrates its bias to the configured target marginal.
pub fn fit_discriminative(
    features: &[Vec<f64>],
    scores: &ScoreMatrix,
    cfg: &DiscriminativeConfig,
) -> Result<DiscriminativeFit> {
    if features.len() != scores.docs() {
        return Err(Error::Shape(format!(
            "{} features for {} scored documents",
            features.len(),
            scores.docs()
        )));
    }
    let p = scores.paths();
    let labels = argmax_labels(scores);
    let mut counts = vec![0usize; p];
    labels.iter().for_each(|&l| counts[l] += 1);
    let empty_classes: Vec<usize> = (0..p).filter(|&c| counts[c] == 0).collect();
    if !empty_classes.is_empty() {
        log::warn!("router classes without labels: {empty_classes:?}");
    }
    let (uncalibrated, iterations, grad_norm) = fit_logistic(features, &labels, p, &cfg.logreg)?;
    let target = match &cfg.target {
        TargetDist::ArgmaxLabels => counts
            .iter()
            .map(|&c| c as f64 / labels.len() as f64)
            .collect(),
        TargetDist::Uniform => vec![1.0 / p as f64; p],
        TargetDist::Custom(t) => t.clone(),
    };
    let mut router = uncalibrated.clone();
    let calibration = calibrate_bias(&mut router, features, &target, &cfg.calibration)?;
    Ok(DiscriminativeFit {
        router,
        uncalibrated,
        labels,
        iterations,
        grad_norm,
        empty_classes,
        calibration,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn blobs(n: usize, centers: &[Vec<f64>], sd: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sd).unwrap();
        let mut f = Vec::new();
        let mut l = Vec::new();
        for i in 0..n {
            let c = i % centers.len();
            f.push(
                centers[c]
                    .iter()
                    .map(|m| m + noise.sample(&mut rng))
                    .collect(),
            );
            l.push(c);
        }
        (f, l)
    }

    #[test]
    fn separable_labels_recovered() {
        let centers = vec![
            vec![3.0, 0.0, 1.0],
            vec![-3.0, 0.5, 0.0],
            vec![0.0, 4.0, -2.0],
        ];
        let (f, l) = blobs(300, &centers, 0.5, 1);
        let (r, _, _) = fit_logistic(&f, &l, 3, &LogRegConfig::default()).unwrap();
        let hits = f.iter().zip(&l).filter(|(z, &y)| r.route(z) == y).count();
        assert!(hits as f64 / 300.0 >= 0.95, "{hits}");
    }

    #[test]
    fn converges_on_overlapping_classes() {
        let centers = vec![vec![0.5, 0.0], vec![-0.5, 0.0]];
        let (f, l) = blobs(200, &centers, 1.0, 2);
        let (_, iters, g) = fit_logistic(&f, &l, 2, &LogRegConfig::default()).unwrap();
        assert!(g < 1e-6 && iters < 5000, "{iters} {g}");
    }

    #[test]
    fn calibration_to_uniform_from_skewed_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let f: Vec<Vec<f64>> = (0..400)
            .map(|_| vec![noise.sample(&mut rng), noise.sample(&mut rng)])
            .collect();
        let mut r = LinearRouter {
            weight: Tensor::new(vec![4, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0])
                .unwrap(),
            bias: vec![3.0, 1.0, 0.0, -2.0],
        };
        let target = vec![0.25; 4];
        let rep = calibrate_bias(&mut r, &f, &target, &CalibrationConfig::default()).unwrap();
        let m = hard_marginal(&r, &f);
        for x in &m {
            assert!((x - 0.25).abs() <= 0.05 * 0.25 + 1e-12, "{m:?}");
        }
        assert!(rep.total_variation <= 1e-3 + 1e-12, "{rep:?}");
    }
}
