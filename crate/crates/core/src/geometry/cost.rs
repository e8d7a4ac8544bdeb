use crate::error::{Error, Result};
use crate::image::FeatureMap;

/// Cosine similarities between every cell of two feature maps. Row `i` is
/// source cell `i`, column `j` target cell `j`, both flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    /// Cells whose feature vector had zero norm (replaced by zeros).
    pub degenerate_src: Vec<usize>,
    pub degenerate_tgt: Vec<usize>,
}

impl CostVolume {
    pub fn from_data(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols || rows == 0 || cols == 0 {
            return Err(Error::shape("cost_volume", format!("{rows}x{cols} from {} values", data.len())));
        }
        Ok(CostVolume { rows, cols, data, degenerate_src: vec![], degenerate_tgt: vec![] })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }
}

/// Unit-normalized cell vectors as `(cells, channels)` rows, plus the indices
/// of zero-norm cells.
fn normalized_cells(z: &FeatureMap) -> (Vec<f64>, Vec<usize>) {
    let (c, h, w) = z.dims();
    let n = h * w;
    let src = z.data();
    let mut out = vec![0.0; n * c];
    let mut degenerate = Vec::new();
    for cell in 0..n {
        let norm = (0..c).map(|ch| src[ch * n + cell].powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 && norm.is_finite() {
            for ch in 0..c {
                out[cell * c + ch] = src[ch * n + cell] / norm;
            }
        } else {
            degenerate.push(cell);
        }
    }
    (out, degenerate)
}

pub fn cost_volume(a: &FeatureMap, b: &FeatureMap) -> Result<CostVolume> {
    if a.dims() != b.dims() {
        return Err(Error::shape("cost_volume", format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let c = a.channels();
    let n = a.height() * a.width();
    let (na, da) = normalized_cells(a);
    let (nb, db) = normalized_cells(b);
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        let ra = &na[i * c..(i + 1) * c];
        for j in 0..n {
            let rb = &nb[j * c..(j + 1) * c];
            data[i * n + j] = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
        }
    }
    Ok(CostVolume { rows: n, cols: n, data, degenerate_src: da, degenerate_tgt: db })
}

/// `(C - min C) / (max C - min C + eps)`; entries land in `[0, 1)`.
pub fn minmax_norm(cv: &CostVolume, eps: f64) -> CostVolume {
    let lo = cv.data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = cv.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let denom = hi - lo + eps;
    CostVolume {
        rows: cv.rows,
        cols: cv.cols,
        data: cv.data.iter().map(|v| (v - lo) / denom).collect(),
        degenerate_src: cv.degenerate_src.clone(),
        degenerate_tgt: cv.degenerate_tgt.clone(),
    }
}

/// A correspondence between cell centers, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub src: (f64, f64),
    pub dst: (f64, f64),
    pub score: f64,
    pub src_cell: usize,
    pub dst_cell: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchSet(pub Vec<Match>);

impl MatchSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Match> {
        self.0.iter()
    }
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Pairs `(i, j)` with `j = argmax_j C[i, j]` and `i = argmax_i C[i, j]`.
/// Ties resolve to the lowest index.
pub fn mutual_matches(cv: &CostVolume, grid: (usize, usize), stride: usize) -> Result<MatchSet> {
    if !cv.is_square() {
        return Err(Error::shape("mutual_matches", format!("{}x{} cost volume", cv.rows, cv.cols)));
    }
    if grid.0 * grid.1 != cv.rows {
        return Err(Error::shape("mutual_matches", format!("grid {grid:?} for {} cells", cv.rows)));
    }
    let n = cv.rows;
    let row_best: Vec<usize> = (0..n).map(|i| argmax((0..n).map(|j| cv.get(i, j)))).collect();
    let col_best: Vec<usize> = (0..n).map(|j| argmax((0..n).map(|i| cv.get(i, j)))).collect();
    let s = stride as f64;
    let center = |cell: usize| {
        let (u, v) = ((cell % grid.1) as f64, (cell / grid.1) as f64);
        (s * u + (s - 1.0) / 2.0, s * v + (s - 1.0) / 2.0)
    };
    let matches: Vec<Match> = (0..n)
        .filter(|&i| col_best[row_best[i]] == i)
        .map(|i| {
            let j = row_best[i];
            Match { src: center(i), dst: center(j), score: cv.get(i, j), src_cell: i, dst_cell: j }
        })
        .collect();
    if matches.is_empty() {
        return Err(Error::NoMatches);
    }
    Ok(MatchSet(matches))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_map(seed: u64, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::new(c, h, w, rng::normals(&mut rng::stream(seed, "fm"), c * h * w)).unwrap()
    }

    #[test]
    fn orthonormal_self_similarity_is_identity() {
        // four one-hot cells in a 2x2 grid
        let mut data = vec![0.0; 4 * 4];
        for cell in 0..4 {
            data[cell * 4 + cell] = 1.0 + cell as f64;
        }
        let z = FeatureMap::new(4, 2, 2, data).unwrap();
        let cv = cost_volume(&z, &z).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(cv.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn antipodal_diagonal() {
        let a = random_map(1, 3, 2, 3);
        let b = FeatureMap::new(3, 2, 3, a.data().iter().map(|v| -v).collect()).unwrap();
        let cv = cost_volume(&a, &b).unwrap();
        for i in 0..6 {
            assert!((cv.get(i, i) + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_nested_loop_cosine_oracle() {
        let (a, b) = (random_map(2, 2, 2, 3), random_map(3, 2, 2, 3));
        let cv = cost_volume(&a, &b).unwrap();
        let cells = |z: &FeatureMap| -> Vec<Vec<f64>> {
            let mut v = vec![];
            for y in 0..2 {
                for x in 0..3 {
                    v.push(z.cell(y, x));
                }
            }
            v
        };
        let (ca, cb) = (cells(&a), cells(&b));
        for i in 0..6 {
            for j in 0..6 {
                let dot: f64 = ca[i].iter().zip(&cb[j]).map(|(p, q)| p * q).sum();
                let na: f64 = ca[i].iter().map(|p| p * p).sum::<f64>().sqrt();
                let nb: f64 = cb[j].iter().map(|p| p * p).sum::<f64>().sqrt();
                assert!((cv.get(i, j) - dot / (na * nb)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn transpose_symmetry() {
        let (a, b) = (random_map(4, 5, 3, 4), random_map(5, 5, 3, 4));
        let ab = cost_volume(&a, &b).unwrap();
        let ba = cost_volume(&b, &a).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                assert!((ab.get(i, j) - ba.get(j, i)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_cells_are_reported() {
        let mut data = rng::normals(&mut rng::stream(9, "z"), 2 * 4);
        data[1] = 0.0;
        data[5] = 0.0;
        let z = FeatureMap::new(2, 2, 2, data).unwrap();
        let cv = cost_volume(&z, &z).unwrap();
        assert_eq!(cv.degenerate_src, vec![1]);
        assert!((0..4).all(|j| cv.get(1, j) == 0.0));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(cost_volume(&random_map(1, 2, 2, 2), &random_map(1, 2, 2, 3)).is_err());
    }

    #[test]
    fn minmax_midpoint_and_bounds() {
        let cv = CostVolume::from_data(1, 5, vec![2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let n = minmax_norm(&cv, 1e-8);
        assert!((n.get(0, 2) - 2.0 / (4.0 + 1e-8)).abs() < 1e-15);
        assert!(n.get(0, 4) < 1.0);
        assert_eq!(n.get(0, 0), 0.0);
        let flat = minmax_norm(&CostVolume::from_data(2, 2, vec![0.7; 4]).unwrap(), 1e-8);
        assert!(flat.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_and_permutation_matches() {
        let n = 4;
        let eye: Vec<f64> = (0..16).map(|k| if k / n == k % n { 1.0 } else { 0.0 }).collect();
        let m = mutual_matches(&CostVolume::from_data(4, 4, eye).unwrap(), (2, 2), 1).unwrap();
        assert!(m.iter().all(|m| m.src_cell == m.dst_cell));
        assert_eq!(m.len(), 4);

        let perm = [2, 0, 3, 1];
        let mut p = vec![0.0; 16];
        for (i, &j) in perm.iter().enumerate() {
            p[i * 4 + j] = 1.0;
        }
        let m = mutual_matches(&CostVolume::from_data(4, 4, p).unwrap(), (2, 2), 8).unwrap();
        for mm in m.iter() {
            assert_eq!(perm[mm.src_cell], mm.dst_cell);
        }
        // cell 1 of a 2x2 stride-8 grid is centered at (11.5, 3.5)
        assert_eq!(m.0[1].src, (11.5, 3.5));
    }

    #[test]
    fn random_matches_equal_double_argmax_oracle() {
        let data = rng::normals(&mut rng::stream(21, "cv"), 36);
        let cv = CostVolume::from_data(6, 6, data.clone()).unwrap();
        let got: Vec<(usize, usize)> =
            mutual_matches(&cv, (2, 3), 4).unwrap().iter().map(|m| (m.src_cell, m.dst_cell)).collect();
        let mut want = vec![];
        for i in 0..6 {
            for j in 0..6 {
                let v = data[i * 6 + j];
                let row_max = (0..6).all(|k| data[i * 6 + k] <= v);
                let col_max = (0..6).all(|k| data[k * 6 + j] <= v);
                if row_max && col_max {
                    want.push((i, j));
                }
            }
        }
        assert_eq!(got, want);
    }
}
