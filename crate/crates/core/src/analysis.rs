//! Language-independent sentence embeddings and the tools built on them:
//! a crosslingual logistic-regression classifier, PCA projection, nearest
//! neighbour retrieval and a static scatter-plot emitter.
//!
//! Everything here works in `f64` on mean-pooled interlingua outputs. The
//! classifier never sees the language tag, so a model fitted on one language
//! applies unchanged to embeddings from any other.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::bpe::{Tokenizer, EOS};
use crate::model::MultilingualModel;
use crate::{Error, Real, Result};

/// Mean-pooled interlingua output of one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEmbedding {
    pub vector: Vec<f64>,
    pub language: String,
    pub text: String,
    /// The encoded sentence exceeded the maximum source length and was cut.
    pub truncated: bool,
}

/// Frames `ids` for the encoder, cutting to `max` tokens with a closing EOS.
fn fit_source(ids: &[usize], max: usize) -> (Vec<usize>, bool) {
    if ids.len() <= max {
        return (ids.to_vec(), false);
    }
    let mut out = ids[..max - 1].to_vec();
    out.push(EOS);
    (out, true)
}

fn tokenizer_for<'a, T: Real>(model: &MultilingualModel<T>, tokenizers: &'a [Tokenizer], lang: &str) -> Result<&'a Tokenizer> {
    let idx = model.language_index(lang)?;
    tokenizers.get(idx).ok_or_else(|| Error::UnknownLanguage(lang.to_string()))
}

/// Embeds a whole text as one sequence; empty text embeds `[BOS, EOS]`.
pub fn embed_sentence<T: Real>(
    model: &MultilingualModel<T>,
    tokenizers: &[Tokenizer],
    lang: &str,
    text: &str,
) -> Result<SentenceEmbedding> {
    let ids = tokenizer_for(model, tokenizers, lang)?.encode(text);
    let (ids, truncated) = fit_source(&ids, model.config.max_source_len);
    let vector = model.embed(lang, &ids)?.mean_pool().into_iter().map(Real::to_f64).collect();
    Ok(SentenceEmbedding {
        vector,
        language: lang.to_string(),
        text: text.to_string(),
        truncated,
    })
}

/// Batched [`embed_sentence`]; sentences are processed `chunk` at a time.
pub fn embed_sentences<T: Real>(
    model: &MultilingualModel<T>,
    tokenizers: &[Tokenizer],
    lang: &str,
    texts: &[&str],
    chunk: usize,
) -> Result<Vec<SentenceEmbedding>> {
    let tok = tokenizer_for(model, tokenizers, lang)?;
    let encoded: Vec<(Vec<usize>, bool)> = texts
        .iter()
        .map(|t| fit_source(&tok.encode(t), model.config.max_source_len))
        .collect();
    let ids: Vec<&[usize]> = encoded.iter().map(|(ids, _)| ids.as_slice()).collect();
    let vectors = embed_ids(model, lang, &ids, chunk)?;
    Ok(vectors
        .into_iter()
        .zip(encoded)
        .zip(texts)
        .map(|((vector, (_, truncated)), text)| SentenceEmbedding {
            vector,
            language: lang.to_string(),
            text: text.to_string(),
            truncated,
        })
        .collect())
}

/// Mean-pooled embeddings of already-encoded sentences.
pub fn embed_ids<T: Real>(model: &MultilingualModel<T>, lang: &str, sentences: &[&[usize]], chunk: usize) -> Result<Vec<Vec<f64>>> {
    let lang = model.language_index(lang)?;
    let mut out = Vec::with_capacity(sentences.len());
    for part in sentences.chunks(chunk.max(1)) {
        for inter in model.embed_batch(lang, part)? {
            out.push(inter.mean_pool().into_iter().map(Real::to_f64).collect());
        }
    }
    Ok(out)
}

// ---- vector helpers ------------------------------------------------------

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

/// Index of the candidate most cosine-similar to `query`; ties go to the
/// lower index.
pub fn nearest_neighbor(query: &[f64], candidates: &[Vec<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let s = cosine(query, c);
        if best.map_or(true, |(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

/// Fraction of rows whose nearest neighbour among `targets` is the row with
/// the same index.
pub fn retrieval_accuracy(queries: &[Vec<f64>], targets: &[Vec<f64>]) -> f64 {
    if queries.is_empty() {
        return 0.0;
    }
    let hits = queries
        .iter()
        .enumerate()
        .filter(|(i, q)| nearest_neighbor(q, targets) == Some(*i))
        .count();
    hits as f64 / queries.len() as f64
}

fn check_dims(features: &[Vec<f64>], op: &'static str) -> Result<usize> {
    let d = features.first().ok_or(Error::Empty(op))?.len();
    for f in features {
        if f.len() != d {
            return Err(Error::Shape {
                op,
                lhs: vec![d],
                rhs: vec![f.len()],
            });
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op.to_string()));
        }
    }
    Ok(d)
}

// ---- logistic regression -------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticOptions {
    pub l2: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        LogisticOptions {
            l2: 1e-3,
            tolerance: 1e-5,
            max_iterations: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub model: LogisticModel,
    pub loss: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + libm::log1p(libm::exp(-z))
    } else {
        libm::log1p(libm::exp(z))
    }
}

/// Mean logistic loss plus `l2/2 · |w|²` (the bias is not penalised), and
/// its gradient with the bias derivative last.
fn logistic_objective(features: &[Vec<f64>], labels: &[bool], w: &[f64], b: f64, l2: f64) -> (f64, Vec<f64>) {
    let n = features.len() as f64;
    let mut grad = vec![0.0; w.len() + 1];
    let mut loss = 0.0;
    for (x, &y) in features.iter().zip(labels) {
        let z = dot(w, x) + b;
        loss += if y { softplus(-z) } else { softplus(z) };
        let r = sigmoid(z) - if y { 1.0 } else { 0.0 };
        for (g, xi) in grad.iter_mut().zip(x) {
            *g += r * xi;
        }
        grad[w.len()] += r;
    }
    for g in grad.iter_mut() {
        *g /= n;
    }
    for (g, wi) in grad.iter_mut().zip(w) {
        *g += l2 * wi;
    }
    (loss / n + 0.5 * l2 * dot(w, w), grad)
}

/// Fits from zero weights; see [`train_logistic_from`].
pub fn train_logistic(features: &[Vec<f64>], labels: &[bool], options: &LogisticOptions) -> Result<LogisticFit> {
    let d = check_dims(features, "train_logistic")?;
    train_logistic_from(features, labels, options, LogisticModel { weights: vec![0.0; d], bias: 0.0 })
}

/// Full-batch gradient descent with backtracking step size until the
/// gradient norm drops below `tolerance` or the iteration cap is reached.
pub fn train_logistic_from(
    features: &[Vec<f64>],
    labels: &[bool],
    options: &LogisticOptions,
    init: LogisticModel,
) -> Result<LogisticFit> {
    let d = check_dims(features, "train_logistic")?;
    if labels.len() != features.len() {
        return Err(Error::Shape {
            op: "train_logistic",
            lhs: vec![features.len()],
            rhs: vec![labels.len()],
        });
    }
    if init.weights.len() != d {
        return Err(Error::Shape {
            op: "train_logistic",
            lhs: vec![d],
            rhs: vec![init.weights.len()],
        });
    }
    if labels.iter().all(|&y| y) || labels.iter().all(|&y| !y) {
        return Err(Error::InvalidArgument("logistic regression needs examples of both classes".into()));
    }
    if !(options.l2 >= 0.0 && options.tolerance > 0.0) {
        return Err(Error::InvalidArgument("l2 must be non-negative and tolerance positive".into()));
    }
    let mut w = init.weights;
    let mut b = init.bias;
    let (mut loss, mut grad) = logistic_objective(features, labels, &w, b, options.l2);
    let mut step = 1.0;
    let mut iterations = 0;
    while iterations < options.max_iterations {
        let gnorm2 = dot(&grad, &grad);
        if libm::sqrt(gnorm2) < options.tolerance {
            break;
        }
        iterations += 1;
        // Armijo backtracking; the step grows again after each success
        loop {
            let w_new: Vec<f64> = w.iter().zip(&grad).map(|(wi, g)| wi - step * g).collect();
            let b_new = b - step * grad[d];
            let (l_new, g_new) = logistic_objective(features, labels, &w_new, b_new, options.l2);
            if l_new <= loss - 0.5 * step * gnorm2 || step < 1e-12 {
                w = w_new;
                b = b_new;
                loss = l_new;
                grad = g_new;
                step *= 2.0;
                break;
            }
            step *= 0.5;
        }
    }
    let gradient_norm = norm(&grad);
    Ok(LogisticFit {
        model: LogisticModel { weights: w, bias: b },
        loss,
        gradient_norm,
        iterations,
    })
}

/// Probability of the positive class, `sigmoid(w·e + b)`.
pub fn classify(model: &LogisticModel, embedding: &[f64]) -> Result<f64> {
    if embedding.len() != model.weights.len() {
        return Err(Error::Shape {
            op: "classify",
            lhs: vec![model.weights.len()],
            rhs: vec![embedding.len()],
        });
    }
    Ok(sigmoid(dot(&model.weights, embedding) + model.bias))
}

/// Fraction of examples whose thresholded prediction matches the label.
pub fn accuracy(model: &LogisticModel, features: &[Vec<f64>], labels: &[bool]) -> Result<f64> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::InvalidArgument("accuracy needs one label per example".into()));
    }
    let mut hits = 0;
    for (x, &y) in features.iter().zip(labels) {
        if (classify(model, x)? >= 0.5) == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / features.len() as f64)
}

/// Per-language accuracy with a normal-approximation 95% interval and the
/// share of positive labels.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyColumn {
    pub language: String,
    pub accuracy: f64,
    pub interval: f64,
    pub positive_rate: f64,
    pub count: usize,
}

impl AccuracyColumn {
    pub fn evaluate(model: &LogisticModel, language: &str, features: &[Vec<f64>], labels: &[bool]) -> Result<Self> {
        let acc = accuracy(model, features, labels)?;
        let n = labels.len() as f64;
        Ok(AccuracyColumn {
            language: language.to_string(),
            accuracy: acc,
            interval: 1.96 * libm::sqrt(acc * (1.0 - acc) / n),
            positive_rate: labels.iter().filter(|&&y| y).count() as f64 / n,
            count: labels.len(),
        })
    }
}

/// Tab-separated table with languages as columns, an accuracy row and a
/// positive-share row.
pub fn accuracy_table(columns: &[AccuracyColumn]) -> String {
    let mut out = String::new();
    for c in columns {
        out.push('\t');
        out.push_str(&c.language);
    }
    out.push_str("\nEmbeddings");
    for c in columns {
        let _ = write!(out, "\t{:.1}% ± {:.1}%", 100.0 * c.accuracy, 100.0 * c.interval);
    }
    out.push_str("\n% Positive");
    for c in columns {
        let _ = write!(out, "\t{:.1}%", 100.0 * c.positive_rate);
    }
    out.push('\n');
    out
}

// ---- PCA -----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    pub mean: Vec<f64>,
    /// Orthonormal principal axes, largest variance first.
    pub axes: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Eigenvalue over total variance, per axis.
    pub explained: Vec<f64>,
}

const PCA_TOLERANCE: f64 = 1e-8;
const PCA_MAX_ITERATIONS: usize = 100_000;

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for u in basis {
        let p = dot(v, u);
        for (vi, ui) in v.iter_mut().zip(u) {
            *vi -= p * ui;
        }
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = norm(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}

/// Any unit vector orthogonal to `basis`, preferring low-index coordinates.
fn complement(basis: &[Vec<f64>], d: usize) -> Vec<f64> {
    let mut best = vec![0.0; d];
    let mut best_norm = -1.0;
    for i in 0..d {
        let mut e = vec![0.0; d];
        e[i] = 1.0;
        orthogonalize(&mut e, basis);
        orthogonalize(&mut e, basis);
        let n = norm(&e);
        if n > best_norm + 1e-12 {
            best_norm = n;
            best = e;
        }
    }
    normalize(&mut best);
    best
}

fn matvec(m: &[f64], d: usize, v: &[f64]) -> Vec<f64> {
    (0..d).map(|r| dot(&m[r * d..(r + 1) * d], v)).collect()
}

/// Top-`k` eigenpairs of the sample covariance by power iteration with
/// deflation. Data are centred but not whitened.
pub fn pca_fit(data: &[Vec<f64>], k: usize) -> Result<PcaProjection> {
    let d = check_dims(data, "pca_fit")?;
    if k == 0 || k > d || k > data.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot extract {k} components from {} samples of dimension {d}",
            data.len()
        )));
    }
    let n = data.len() as f64;
    let mut mean = vec![0.0; d];
    for x in data {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let denom = if data.len() > 1 { n - 1.0 } else { 1.0 };
    let mut cov = vec![0.0; d * d];
    for x in data {
        let c: Vec<f64> = x.iter().zip(&mean).map(|(v, m)| v - m).collect();
        for r in 0..d {
            for s in r..d {
                cov[r * d + s] += c[r] * c[s];
            }
        }
    }
    for r in 0..d {
        for s in r..d {
            cov[r * d + s] /= denom;
            cov[s * d + r] = cov[r * d + s];
        }
    }
    let total: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let scale = (0..d * d).map(|i| libm::fabs(cov[i])).fold(0.0, f64::max);

    let mut deflated = cov.clone();
    let mut axes: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut eigenvalues = Vec::with_capacity(k);
    for _ in 0..k {
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.01 * i as f64 / d as f64).collect();
        orthogonalize(&mut v, &axes);
        if normalize(&mut v) < 1e-12 {
            v = complement(&axes, d);
        }
        let mut lambda = 0.0;
        for _ in 0..PCA_MAX_ITERATIONS {
            let mut w = matvec(&deflated, d, &v);
            orthogonalize(&mut w, &axes);
            let len = normalize(&mut w);
            if len <= 1e-14 * scale.max(f64::MIN_POSITIVE) {
                // the remaining spectrum is numerically zero
                lambda = 0.0;
                v = complement(&axes, d);
                break;
            }
            if dot(&w, &v) < 0.0 {
                // a negative eigenvalue after deflation cannot occur for a
                // covariance, but round-off can flip the sign
                for x in w.iter_mut() {
                    *x = -*x;
                }
            }
            let delta = distance(&w, &v);
            v = w;
            lambda = len;
            if delta < PCA_TOLERANCE {
                break;
            }
        }
        // Rayleigh quotient on the undeflated covariance
        let cv = matvec(&cov, d, &v);
        let rq = dot(&v, &cv);
        if lambda > 0.0 {
            lambda = rq;
        }
        for r in 0..d {
            for s in 0..d {
                deflated[r * d + s] -= lambda * v[r] * v[s];
            }
        }
        axes.push(v);
        eigenvalues.push(lambda);
    }
    let explained = eigenvalues
        .iter()
        .map(|&l| if total > 0.0 { l / total } else { 0.0 })
        .collect();
    Ok(PcaProjection {
        mean,
        axes,
        eigenvalues,
        explained,
    })
}

impl PcaProjection {
    pub fn components(&self) -> usize {
        self.axes.len()
    }

    /// `axesᵀ (e − mean)`.
    pub fn apply(&self, e: &[f64]) -> Result<Vec<f64>> {
        if e.len() != self.mean.len() {
            return Err(Error::Shape {
                op: "pca_apply",
                lhs: vec![self.mean.len()],
                rhs: vec![e.len()],
            });
        }
        let c: Vec<f64> = e.iter().zip(&self.mean).map(|(v, m)| v - m).collect();
        Ok(self.axes.iter().map(|a| dot(a, &c)).collect())
    }

    /// Maps projected coordinates back to the original space.
    pub fn unproject(&self, p: &[f64]) -> Result<Vec<f64>> {
        if p.len() != self.axes.len() {
            return Err(Error::Shape {
                op: "pca_unproject",
                lhs: vec![self.axes.len()],
                rhs: vec![p.len()],
            });
        }
        let mut out = self.mean.clone();
        for (a, &w) in self.axes.iter().zip(p) {
            for (o, ai) in out.iter_mut().zip(a) {
                *o += w * ai;
            }
        }
        Ok(out)
    }
}

pub fn pca_apply(p: &PcaProjection, e: &[f64]) -> Result<Vec<f64>> {
    p.apply(e)
}

// ---- plotting --------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct PlotPoint {
    pub group: String,
    pub language: String,
    pub x: f64,
    pub y: f64,
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];
const SIZE: f64 = 480.0;
const MARGIN: f64 = 40.0;

fn first_seen<'a>(items: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut seen: Vec<&str> = Vec::new();
    for s in items {
        if !seen.contains(&s) {
            seen.push(s);
        }
    }
    seen
}

fn marker(shape: usize, x: f64, y: f64, color: &str) -> String {
    let r = 5.0;
    match shape % 4 {
        0 => format!(r#"<circle cx="{x:.3}" cy="{y:.3}" r="{r}" fill="{color}"/>"#),
        1 => format!(
            r#"<rect x="{:.3}" y="{:.3}" width="{}" height="{}" fill="{color}"/>"#,
            x - r,
            y - r,
            2.0 * r,
            2.0 * r
        ),
        2 => format!(
            r#"<polygon points="{:.3},{:.3} {:.3},{:.3} {:.3},{:.3}" fill="{color}"/>"#,
            x,
            y - r,
            x - r,
            y + r,
            x + r,
            y + r
        ),
        _ => format!(
            r#"<polygon points="{:.3},{:.3} {:.3},{:.3} {:.3},{:.3} {:.3},{:.3}" fill="{color}"/>"#,
            x,
            y - r,
            x + r,
            y,
            x,
            y + r,
            x - r,
            y
        ),
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Self-contained SVG scatter: one colour per group, one marker shape per
/// language, with a legend. Output depends only on the points.
pub fn render_svg(points: &[PlotPoint]) -> Result<String> {
    if points.is_empty() {
        return Err(Error::Empty("render_svg"));
    }
    if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(Error::NonFinite("render_svg".into()));
    }
    let groups = first_seen(points.iter().map(|p| p.group.as_str()));
    let langs = first_seen(points.iter().map(|p| p.language.as_str()));
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    let span = (x1 - x0).max(y1 - y0);
    let span = if span > 0.0 { span } else { 1.0 };
    let inner = SIZE - 2.0 * MARGIN;
    let sx = |x: f64| MARGIN + (x - x0) / span * inner + (inner - (x1 - x0) / span * inner) / 2.0;
    // SVG y grows downwards
    let sy = |y: f64| SIZE - MARGIN - (y - y0) / span * inner - (inner - (y1 - y0) / span * inner) / 2.0;

    let legend_h = 16.0 * (groups.len() + langs.len()) as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = SIZE + 160.0,
        h = SIZE.max(legend_h + 2.0 * MARGIN)
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r##"<rect x="{m}" y="{m}" width="{i}" height="{i}" fill="none" stroke="#cccccc"/>"##,
        m = MARGIN,
        i = inner
    );
    for p in points {
        let g = groups.iter().position(|&s| s == p.group).unwrap_or(0);
        let l = langs.iter().position(|&s| s == p.language).unwrap_or(0);
        let _ = writeln!(out, "{}", marker(l, sx(p.x), sy(p.y), PALETTE[g % PALETTE.len()]));
    }
    let lx = SIZE + 10.0;
    let mut ly = MARGIN;
    for (g, name) in groups.iter().enumerate() {
        let _ = writeln!(out, "{}", marker(0, lx + 5.0, ly, PALETTE[g % PALETTE.len()]));
        let _ = writeln!(
            out,
            r#"<text x="{:.3}" y="{:.3}" font-family="sans-serif" font-size="11">{}</text>"#,
            lx + 16.0,
            ly + 4.0,
            escape(name)
        );
        ly += 16.0;
    }
    for (l, name) in langs.iter().enumerate() {
        let _ = writeln!(out, "{}", marker(l, lx + 5.0, ly, "#333333"));
        let _ = writeln!(
            out,
            r#"<text x="{:.3}" y="{:.3}" font-family="sans-serif" font-size="11">{}</text>"#,
            lx + 16.0,
            ly + 4.0,
            escape(name)
        );
        ly += 16.0;
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// `group<TAB>lang<TAB>x<TAB>y`, one row per point, no header.
pub fn render_tsv(points: &[PlotPoint]) -> String {
    let mut out = String::new();
    for p in points {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", p.group, p.language, p.x, p.y);
    }
    out
}

pub fn parse_tsv(text: &str) -> Result<Vec<PlotPoint>> {
    let mut out = Vec::new();
    for (position, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || Error::InvalidArgument(format!("line {}: expected group, lang, x, y", position + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        out.push(PlotPoint {
            group: f[0].to_string(),
            language: f[1].to_string(),
            x: f[2].parse().map_err(|_| bad())?,
            y: f[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Mean pairwise distance within groups and between groups.
pub fn group_separation(points: &[PlotPoint]) -> (f64, f64) {
    let (mut within, mut nw, mut between, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            let d = libm::hypot(a.x - b.x, a.y - b.y);
            if a.group == b.group {
                within += d;
                nw += 1;
            } else {
                between += d;
                nb += 1;
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    (mean(within, nw), mean(between, nb))
}

// ---- embedding dump --------------------------------------------------------

/// `lang<TAB>v1,v2,…` with shortest round-trip float formatting.
pub fn format_embedding(e: &SentenceEmbedding) -> String {
    let mut out = String::with_capacity(e.language.len() + 12 * e.vector.len());
    out.push_str(&e.language);
    out.push('\t');
    for (i, v) in e.vector.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{v}");
    }
    out
}

/// Parses one dump line; the text reference is left empty.
pub fn parse_embedding(line: &str) -> Result<SentenceEmbedding> {
    let bad = || Error::InvalidArgument(format!("malformed embedding line `{}`", line.chars().take(40).collect::<String>()));
    let (lang, values) = line.split_once('\t').ok_or_else(bad)?;
    if lang.is_empty() {
        return Err(bad());
    }
    let vector = values
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<Vec<f64>>>()?;
    if vector.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embedding".into()));
    }
    Ok(SentenceEmbedding {
        vector,
        language: lang.to_string(),
        text: String::new(),
        truncated: false,
    })
}
