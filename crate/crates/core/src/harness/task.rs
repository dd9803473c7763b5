use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::model::ArchSpec;
use crate::trainer::{derive_seed, Dataset};

/// Gaussian token clouds around class centroids.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    /// `C×input_dim`.
    pub centroids: Array2<f64>,
    /// Label carried by examples drawn around each centroid.
    pub labels_of: Vec<usize>,
    pub noise: f64,
    pub train: Dataset,
    pub eval: Dataset,
}

const STREAM_CENTROIDS: u64 = 11;
const STREAM_TRAIN: u64 = 12;
const STREAM_EVAL: u64 = 13;
const STREAM_PERMUTE: u64 = 14;

fn sample_split(centroids: &Array2<f64>, labels_of: &[usize], n: usize, tokens: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = centroids.nrows();
    let dim = centroids.ncols();
    let mut x = Array3::<f64>::zeros((n, tokens, dim));
    let mut labels = Vec::with_capacity(n);
    for (k, mut example) in x.axis_iter_mut(Axis(0)).enumerate() {
        let c = k % classes;
        for mut token in example.rows_mut() {
            for (v, &mu) in token.iter_mut().zip(centroids.row(c)) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = mu + noise * z;
            }
        }
        labels.push(labels_of[c]);
    }
    Dataset { x, labels }
}

/// `classes` centroids drawn uniformly on a sphere of `radius` in input space;
/// every example is `N` tokens of its centroid plus `noise`-scaled Gaussian noise.
pub fn make_task(seed: u64, classes: usize, n_train: usize, n_eval: usize, spec: &ArchSpec, noise: f64, radius: f64) -> SyntheticTask {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_CENTROIDS));
    let mut centroids = Array2::<f64>::zeros((classes, spec.input_dim));
    for mut row in centroids.rows_mut() {
        loop {
            row.mapv_inplace(|_| StandardNormal.sample(&mut rng));
            let norm = row.dot(&row).sqrt();
            if norm > 1e-12 {
                row.mapv_inplace(|v| v * radius / norm);
                break;
            }
        }
    }
    let labels_of: Vec<usize> = (0..classes).collect();
    let train = sample_split(&centroids, &labels_of, n_train, spec.tokens, noise, derive_seed(seed, STREAM_TRAIN));
    let eval = sample_split(&centroids, &labels_of, n_eval, spec.tokens, noise, derive_seed(seed, STREAM_EVAL));
    SyntheticTask { centroids, labels_of, noise, train, eval }
}

/// Same centroids as `source` with labels moved by a fixed-point-free
/// permutation and freshly drawn noise.
pub fn make_target_task(source: &SyntheticTask, seed: u64, n_train: usize, n_eval: usize, tokens: usize) -> SyntheticTask {
    let classes = source.centroids.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_PERMUTE));
    let mut perm: Vec<usize> = (0..classes).collect();
    loop {
        perm.shuffle(&mut rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            break;
        }
    }
    let labels_of: Vec<usize> = source.labels_of.iter().map(|&l| perm[l]).collect();
    let train_seed = derive_seed(seed ^ 0x7461_7267, STREAM_TRAIN);
    let eval_seed = derive_seed(seed ^ 0x7461_7267, STREAM_EVAL);
    SyntheticTask {
        centroids: source.centroids.clone(),
        train: sample_split(&source.centroids, &labels_of, n_train, tokens, source.noise, train_seed),
        eval: sample_split(&source.centroids, &labels_of, n_eval, tokens, source.noise, eval_seed),
        labels_of,
        noise: source.noise,
    }
}

/// Accuracy of assigning each example the label of the centroid nearest to its token mean.
pub fn nearest_centroid_accuracy(task: &SyntheticTask, data: &Dataset) -> f64 {
    let mut correct = 0;
    for (example, &label) in data.x.axis_iter(Axis(0)).zip(&data.labels) {
        let mean = example.mean_axis(Axis(0)).expect("tokens");
        let best = task
            .centroids
            .rows()
            .into_iter()
            .map(|c| (&c - &mean).mapv(|v| v * v).sum())
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, d)| if d < acc.1 { (i, d) } else { acc })
            .0;
        if task.labels_of[best] == label {
            correct += 1;
        }
    }
    correct as f64 / data.len().max(1) as f64
}
