//! k-means semantic tokenizer and the learnable token-embedding lookup.

use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde_json::json;

use crate::container::Container;
use crate::{seeded_rng, Error, Real, Result};

pub const CODEBOOK_KIND: &str = "codebook";
pub const CODEBOOK_VERSION: u32 = 1;

/// Result of [`fit_kmeans`].
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub centroids: Array2<f64>,
    /// Centroids straight after k-means++ seeding.
    pub initial: Array2<f64>,
    /// Inertia after every assignment pass; non-increasing.
    pub inertia: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl KMeansFit {
    pub fn final_inertia(&self) -> f64 {
        *self.inertia.last().expect("at least one pass")
    }
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid and its squared distance; ties go to the lower index.
fn nearest(frame: ArrayView1<'_, f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.outer_iter().enumerate() {
        let d = sq_dist(frame, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign_with_cost(frames: &Array2<f64>, centroids: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
    frames.outer_iter().map(|f| nearest(f, centroids)).unzip()
}

fn kmeans_pp(frames: &Array2<f64>, k: usize, rng: &mut crate::Rng) -> Result<Array2<f64>> {
    let n = frames.nrows();
    let mut centroids = Array2::zeros((k, frames.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&frames.row(first));
    let mut d2: Vec<f64> = frames
        .outer_iter()
        .map(|f| sq_dist(f, frames.row(first)))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid(format!(
                "only {c} distinct frames, cannot seed {k} clusters"
            )));
        }
        let mut target = rng.random_range(0.0..total);
        let mut pick = n - 1;
        for (i, &w) in d2.iter().enumerate() {
            if w > 0.0 && target < w {
                pick = i;
                break;
            }
            target -= w;
        }
        // Guard against rounding landing on an already chosen point.
        if d2[pick] == 0.0 {
            pick = d2
                .iter()
                .enumerate()
                .fold((0, -1.0), |b, (i, &w)| if w > b.1 { (i, w) } else { b })
                .0;
        }
        centroids.row_mut(c).assign(&frames.row(pick));
        for (i, f) in frames.outer_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(f, frames.row(pick)));
        }
    }
    Ok(centroids)
}

/// Lloyd iterations from the given starting centroids.
///
/// An empty cluster is re-seeded with the frame farthest from its current
/// centroid (each such frame is used at most once per pass).
pub fn lloyd(frames: &Array2<f64>, initial: Array2<f64>, max_iters: usize) -> KMeansFit {
    let k = initial.nrows();
    let d = frames.ncols();
    let mut centroids = initial.clone();
    let mut inertia = Vec::new();
    let mut prev: Option<Vec<usize>> = None;
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..max_iters {
        let (labels, dist) = assign_with_cost(frames, &centroids);
        inertia.push(dist.iter().sum());
        if prev.as_ref() == Some(&labels) {
            converged = true;
            break;
        }
        iterations += 1;
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (f, &l) in frames.outer_iter().zip(&labels) {
            sums.row_mut(l).scaled_add(1.0, &f);
            counts[l] += 1;
        }
        let mut far: Vec<usize> = (0..frames.nrows()).collect();
        far.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
        let mut far = far.into_iter();
        for j in 0..k {
            if counts[j] > 0 {
                let mean = &sums.row(j) / counts[j] as f64;
                centroids.row_mut(j).assign(&mean);
            } else if let Some(p) = far.next() {
                centroids.row_mut(j).assign(&frames.row(p));
            }
        }
        prev = Some(labels);
    }
    if !converged {
        let (_, dist) = assign_with_cost(frames, &centroids);
        inertia.push(dist.iter().sum());
    }
    KMeansFit {
        centroids,
        initial,
        inertia,
        iterations,
        converged,
    }
}

/// k-means++ seeding followed by Lloyd's algorithm.
pub fn fit_kmeans(
    frames: &Array2<f64>,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<KMeansFit> {
    if k < 2 {
        return Err(Error::invalid("k-means needs at least 2 clusters"));
    }
    if frames.nrows() < k {
        return Err(Error::invalid(format!(
            "{} frames cannot support {k} clusters",
            frames.nrows()
        )));
    }
    if frames.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("k-means frames".into()));
    }
    let mut rng = seeded_rng(seed);
    let initial = kmeans_pp(frames, k, &mut rng)?;
    Ok(lloyd(frames, initial, max_iters.max(1)))
}

/// Row `i` of the output is `table[tokens[i]]`.
pub fn embed<F: Real>(table: &Array2<F>, tokens: &[u32]) -> Result<Array2<F>> {
    let k = table.nrows();
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= k) {
        return Err(Error::invalid(format!(
            "token {bad} out of range for {k} entries"
        )));
    }
    let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    Ok(table.select(Axis(0), &idx))
}

/// Gradient of a loss with respect to the table, given its gradient with
/// respect to the [`embed`] output. Repeated tokens accumulate.
pub fn embed_grad<F: Real>(
    table_rows: usize,
    tokens: &[u32],
    d_out: &Array2<F>,
) -> Result<Array2<F>> {
    if d_out.nrows() != tokens.len() {
        return Err(Error::shape(
            "embedding gradient rows",
            tokens.len(),
            d_out.nrows(),
        ));
    }
    let mut g = Array2::zeros((table_rows, d_out.ncols()));
    for (&t, row) in tokens.iter().zip(d_out.outer_iter()) {
        if t as usize >= table_rows {
            return Err(Error::invalid(format!("token {t} out of range")));
        }
        g.row_mut(t as usize).scaled_add(F::one(), &row);
    }
    Ok(g)
}

/// Centroids plus the initial token-embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub centroids: Array2<f64>,
    pub embed_table: Array2<f64>,
    /// Name of the feature stream the centroids were fitted on.
    pub stream: String,
    pub inertia: Vec<f64>,
}

impl Codebook {
    /// Fits centroids and draws a standard-normal embedding table.
    pub fn fit(
        frames: &Array2<f64>,
        k: usize,
        d_embed: usize,
        max_iters: usize,
        stream: &str,
        seed: u64,
    ) -> Result<Self> {
        let fit = fit_kmeans(frames, k, max_iters, seed)?;
        let mut rng = seeded_rng(crate::derive_seed(seed, 1));
        let embed_table = Array2::from_shape_simple_fn((k, d_embed), || rng.sample(StandardNormal));
        Ok(Self {
            centroids: fit.centroids,
            embed_table,
            stream: stream.to_string(),
            inertia: fit.inertia,
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.centroids.ncols()
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_table.ncols()
    }

    pub fn assign(&self, frames: &Array2<f64>) -> Result<Vec<u32>> {
        assign(&self.centroids, frames)
    }

    pub fn embed(&self, tokens: &[u32]) -> Result<Array2<f64>> {
        embed(&self.embed_table, tokens)
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(
            CODEBOOK_KIND,
            CODEBOOK_VERSION,
            json!({
                "k": self.k(),
                "d_feat": self.feature_dim(),
                "d_embed": self.embed_dim(),
                "stream": self.stream,
            }),
        );
        c.push_matrix_f64("centroids", &self.centroids)?;
        c.push_matrix_f64("embed_table", &self.embed_table)?;
        c.push_vec_f64("inertia", &self.inertia)?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect(CODEBOOK_KIND, CODEBOOK_VERSION)?;
        let k: usize = c.meta_field("k")?;
        let d_feat: usize = c.meta_field("d_feat")?;
        let d_embed: usize = c.meta_field("d_embed")?;
        let centroids = c.matrix_f64("centroids")?;
        let embed_table = c.matrix_f64("embed_table")?;
        if centroids.dim() != (k, d_feat) || embed_table.dim() != (k, d_embed) {
            return Err(Error::Format {
                kind: CODEBOOK_KIND.into(),
                reason: "array shapes disagree with header".into(),
            });
        }
        Ok(Self {
            centroids,
            embed_table,
            stream: c.meta_field("stream")?,
            inertia: c.vec_f64("inertia")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path, CODEBOOK_KIND, CODEBOOK_VERSION)?)
    }
}

/// Nearest-centroid tokens under squared Euclidean distance.
pub fn assign(centroids: &Array2<f64>, frames: &Array2<f64>) -> Result<Vec<u32>> {
    if frames.ncols() != centroids.ncols() {
        return Err(Error::shape("frame dim", centroids.ncols(), frames.ncols()));
    }
    Ok(frames
        .outer_iter()
        .map(|f| nearest(f, centroids).0 as u32)
        .collect())
}

/// Plug-in mutual information (nats) between two label sequences.
pub fn mutual_information(a: &[u32], b: &[u32]) -> f64 {
    assert_eq!(a.len(), b.len(), "label sequences differ in length");
    let n = a.len() as f64;
    let mut joint = std::collections::HashMap::<(u32, u32), f64>::new();
    let mut pa = std::collections::HashMap::<u32, f64>::new();
    let mut pb = std::collections::HashMap::<u32, f64>::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1.0;
        *pa.entry(x).or_default() += 1.0;
        *pb.entry(y).or_default() += 1.0;
    }
    joint
        .iter()
        .map(|(&(x, y), &c)| c / n * (c * n / (pa[&x] * pb[&y])).ln())
        .sum()
}
