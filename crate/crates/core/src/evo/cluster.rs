use crate::datapipe::TimeSeriesDataset;

/// Pairwise `1 - |pearson r|` between sensors. A constant sensor has
/// correlation 0 with every other sensor.
pub fn correlation_distance(ds: &TimeSeriesDataset) -> Vec<Vec<f64>> {
    let n = ds.sensors();
    let cols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let c = ds.column(j);
            let mean = c.iter().sum::<f64>() / c.len().max(1) as f64;
            c.into_iter().map(|v| v - mean).collect()
        })
        .collect();
    let norms: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let r = if norms[i] > 0.0 && norms[j] > 0.0 {
                let dot: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            d[i][j] = 1.0 - r.abs();
            d[j][i] = d[i][j];
        }
    }
    d
}

/// Agglomerative clustering with average linkage, stopped at `k` clusters.
///
/// Ties merge the pair with the smallest cluster indices. Clusters are
/// returned sorted, ordered by their smallest member.
pub fn average_linkage(dist: &[Vec<f64>], k: usize) -> Vec<Vec<usize>> {
    let n = dist.len();
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    // linkage[a][b]: mean pairwise distance between clusters a and b
    let mut link: Vec<Vec<f64>> = dist.to_vec();
    while clusters.len() > k.max(1) {
        let mut best = (0, 1, f64::INFINITY);
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                if link[a][b] < best.2 {
                    best = (a, b, link[a][b]);
                }
            }
        }
        let (a, b, _) = best;
        let (na, nb) = (clusters[a].len() as f64, clusters[b].len() as f64);
        for c in 0..clusters.len() {
            if c != a && c != b {
                let v = (na * link[a][c] + nb * link[b][c]) / (na + nb);
                link[a][c] = v;
                link[c][a] = v;
            }
        }
        let merged = clusters.remove(b);
        clusters[a].extend(merged);
        link.remove(b);
        for row in &mut link {
            row.remove(b);
        }
    }
    for c in &mut clusters {
        c.sort_unstable();
    }
    clusters.sort_by_key(|c| c[0]);
    clusters
}
