//! Semantic consistency: thresholded one-to-one matching IoU and the
//! k-nearest-neighbor graph geodesics it is measured with.

use petgraph::algo::dijkstra;
use petgraph::graph::{NodeIndex, UnGraph};

use crate::error::{Error, Result};
use crate::geometry::{nearest_index, PointCloud, Vec3};

/// Size of a greedy one-to-one matching between rows and columns of
/// `dist`: pairs with distance `<= t` are taken by ascending distance (ties
/// by row, then column) when both ends are still free.
pub fn greedy_match_count(dist: &[Vec<f64>], t: f64) -> usize {
    let cols = dist.first().map_or(0, Vec::len);
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, row) in dist.iter().enumerate() {
        for (j, &d) in row.iter().enumerate() {
            if d <= t {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut row_used = vec![false; dist.len()];
    let mut col_used = vec![false; cols];
    let mut count = 0;
    for (_, i, j) in pairs {
        if !row_used[i] && !col_used[j] {
            row_used[i] = true;
            col_used[j] = true;
            count += 1;
        }
    }
    count
}

/// `|matched| / (|pred| + |ref| - |matched|)`; 0 when there is no
/// prediction.
pub fn matching_iou(dist: &[Vec<f64>], n_pred: usize, n_ref: usize, t: f64) -> f64 {
    if n_pred == 0 {
        return 0.0;
    }
    let m = greedy_match_count(dist, t);
    let union = n_pred + n_ref - m;
    if union == 0 {
        0.0
    } else {
        m as f64 / union as f64
    }
}

/// Predicted-to-annotated distances of one instance (rows: predictions).
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedInstance {
    pub distances: Vec<Vec<f64>>,
    pub n_pred: usize,
    pub n_annotated: usize,
}

impl AnnotatedInstance {
    pub fn new(distances: Vec<Vec<f64>>, n_annotated: usize) -> Result<Self> {
        if distances.iter().any(|r| r.len() != n_annotated) {
            return Err(Error::invalid("distances", "every row needs one entry per annotation"));
        }
        Ok(Self {
            n_pred: distances.len(),
            distances,
            n_annotated,
        })
    }
}

/// mIoU over instances at each threshold, with greedy one-to-one matching.
pub fn semantic_miou_annotated(instances: &[AnnotatedInstance], thresholds: &[f64]) -> Result<Vec<f64>> {
    if instances.is_empty() {
        return Err(Error::invalid("instances", "no instances"));
    }
    Ok(thresholds
        .iter()
        .map(|&t| {
            instances
                .iter()
                .map(|x| matching_iou(&x.distances, x.n_pred, x.n_annotated, t))
                .sum::<f64>()
                / instances.len() as f64
        })
        .collect())
}

/// Point-to-point map between two surfaces, given as paired samples.
/// Points off the samples use their nearest source sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Correspondence {
    pub source: Vec<Vec3>,
    pub target: Vec<Vec3>,
}

impl Correspondence {
    pub fn new(source: Vec<Vec3>, target: Vec<Vec3>) -> Result<Self> {
        if source.len() != target.len() || source.is_empty() {
            return Err(Error::invalid("correspondence", "need equally many non-zero source and target points"));
        }
        Ok(Self { source, target })
    }

    pub fn map(&self, p: &Vec3) -> Vec3 {
        self.target[nearest_index(&self.source, p).expect("non-empty")]
    }
}

/// Distances from each mapped first-model keypoint to every second-model
/// keypoint.
pub fn pairwise_distances(kps_1: &[Vec3], kps_2: &[Vec3], corr: &Correspondence) -> Vec<Vec<f64>> {
    kps_1
        .iter()
        .map(|k| {
            let c = corr.map(k);
            kps_2.iter().map(|q| (q - c).norm()).collect()
        })
        .collect()
}

/// One model pair for the pairwise protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedInstance {
    pub kps_1: Vec<Vec3>,
    pub kps_2: Vec<Vec3>,
    pub correspondence: Correspondence,
}

/// mIoU over model pairs: first-model keypoints are carried to the second
/// model through the correspondence and matched one-to-one as in
/// [`semantic_miou_annotated`].
pub fn semantic_miou_pairwise(instances: &[PairedInstance], thresholds: &[f64]) -> Result<Vec<f64>> {
    let converted: Vec<AnnotatedInstance> = instances
        .iter()
        .map(|x| AnnotatedInstance {
            distances: pairwise_distances(&x.kps_1, &x.kps_2, &x.correspondence),
            n_pred: x.kps_1.len(),
            n_annotated: x.kps_2.len(),
        })
        .collect();
    semantic_miou_annotated(&converted, thresholds)
}

/// Graph over `cloud` linking every point to its `k` nearest neighbors
/// (symmetrized), weighted by Euclidean length.
pub fn knn_graph(cloud: &PointCloud, k: usize) -> Result<UnGraph<(), f64>> {
    if k < 4 {
        return Err(Error::invalid("k", format!("{k} < 4")));
    }
    let pts = cloud.points();
    let n = pts.len();
    let mut g = UnGraph::<(), f64>::with_capacity(n, n * k);
    for _ in 0..n {
        g.add_node(());
    }
    let mut seen = std::collections::HashSet::new();
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i).map(|j| ((pts[i] - pts[j]).norm_squared(), j)));
        let kk = k.min(order.len());
        if kk == 0 {
            continue;
        }
        order.select_nth_unstable_by(kk - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(d2, j) in &order[..kk] {
            if seen.insert((i.min(j), i.max(j))) {
                g.add_edge(NodeIndex::new(i), NodeIndex::new(j), d2.sqrt());
            }
        }
    }
    Ok(g)
}

/// Shortest-path distances over the k-NN graph from each source index to
/// each target index; disconnected pairs are infinite.
pub fn geodesic_distances(cloud: &PointCloud, sources: &[usize], targets: &[usize], k: usize) -> Result<Vec<Vec<f64>>> {
    let n = cloud.len();
    if let Some(&bad) = sources.iter().chain(targets).find(|&&i| i >= n) {
        return Err(Error::invalid("index", format!("{bad} out of range for {n} points")));
    }
    let g = knn_graph(cloud, k)?;
    Ok(sources
        .iter()
        .map(|&s| {
            let d = dijkstra(&g, NodeIndex::new(s), None, |e| *e.weight());
            targets
                .iter()
                .map(|&t| d.get(&NodeIndex::new(t)).copied().unwrap_or(f64::INFINITY))
                .collect()
        })
        .collect())
}

/// Geodesic distances between arbitrary points, each represented by its
/// nearest cloud point.
pub fn geodesic_between(cloud: &PointCloud, a: &[Vec3], b: &[Vec3], k: usize) -> Result<Vec<Vec<f64>>> {
    let idx = |p: &Vec3| nearest_index(cloud.points(), p).expect("cloud is non-empty");
    let sa: Vec<usize> = a.iter().map(idx).collect();
    let sb: Vec<usize> = b.iter().map(idx).collect();
    geodesic_distances(cloud, &sa, &sb, k)
}
