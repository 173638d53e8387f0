//! Undirected 8-neighbour spatial graphs over patch grids.

use std::collections::HashMap;

use crate::dataio::{PatientRecord, Scale};
use crate::error::{Error, Result};
use crate::numerics::Mat;

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleGraph {
    pub scale: Scale,
    pub features: Mat,
    pub coords: Vec<(usize, usize)>,
    /// Unordered pairs stored as `(m, n)` with `m < n`, sorted.
    pub edges: Vec<(usize, usize)>,
    pub adjacency: Mat,
}

impl ScaleGraph {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency.row(node).iter().filter(|&&a| a != 0.0).count()
    }

    /// Neighbour lists in ascending index order.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.len()];
        for &(m, n) in &self.edges {
            out[m].push(n);
            out[n].push(m);
        }
        for list in &mut out {
            list.sort_unstable();
        }
        out
    }

    /// Row-normalised adjacency: row `m` averages over the neighbours of `m`.
    /// Isolated nodes get an all-zero row.
    pub fn mean_aggregator(&self) -> Mat {
        let mut p = self.adjacency.clone();
        for mut row in p.rows_mut() {
            let deg = row.sum();
            if deg > 0.0 {
                row /= deg;
            }
        }
        p
    }
}

fn chebyshev(a: (usize, usize), b: (usize, usize)) -> usize {
    a.0.abs_diff(b.0).max(a.1.abs_diff(b.1))
}

pub fn build_grid_graph(features: Mat, coords: Vec<(usize, usize)>, scale: Scale) -> Result<ScaleGraph> {
    if coords.is_empty() {
        return Err(Error::invalid(format!("{} graph has no nodes", scale.name())));
    }
    if features.nrows() != coords.len() {
        return Err(Error::invalid(format!(
            "{} graph: {} feature rows for {} coordinates",
            scale.name(),
            features.nrows(),
            coords.len()
        )));
    }
    let mut index = HashMap::with_capacity(coords.len());
    for (i, &c) in coords.iter().enumerate() {
        if index.insert(c, i).is_some() {
            return Err(Error::invalid(format!(
                "{} graph: duplicate coordinate ({},{})",
                scale.name(),
                c.0,
                c.1
            )));
        }
    }
    let n = coords.len();
    let mut edges = Vec::new();
    let mut adjacency = Mat::zeros((n, n));
    for (m, &(r, c)) in coords.iter().enumerate() {
        for dr in -1isize..=1 {
            for dc in -1isize..=1 {
                if dr == 0 && dc == 0 {
                    continue;
                }
                let (Some(rr), Some(cc)) = (r.checked_add_signed(dr), c.checked_add_signed(dc)) else {
                    continue;
                };
                if let Some(&k) = index.get(&(rr, cc)) {
                    adjacency[[m, k]] = 1.0;
                    if m < k {
                        edges.push((m, k));
                    }
                }
            }
        }
    }
    edges.sort_unstable();
    Ok(ScaleGraph {
        scale,
        features,
        coords,
        edges,
        adjacency,
    })
}

/// Graphs for the small, medium and large fields of view, in that order.
pub fn build_multiscale(patient: &PatientRecord) -> Result<[ScaleGraph; 3]> {
    let build = |scale: Scale| {
        let g = patient.grid(scale);
        build_grid_graph(g.features.clone(), g.coords.clone(), scale)
    };
    Ok([build(Scale::Small)?, build(Scale::Medium)?, build(Scale::Large)?])
}

/// Edge count of a full `r × c` grid: sides plus both diagonals.
pub fn full_grid_edge_count(r: usize, c: usize) -> usize {
    if r == 0 || c == 0 {
        return 0;
    }
    r * (c - 1) + c * (r - 1) + 2 * (r - 1) * (c - 1)
}

/// Brute-force Chebyshev-1 pair enumeration, the reference for the builder.
pub fn brute_force_edges(coords: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for m in 0..coords.len() {
        for n in m + 1..coords.len() {
            if chebyshev(coords[m], coords[n]) == 1 {
                out.push((m, n));
            }
        }
    }
    out
}

pub fn full_grid_coords(r: usize, c: usize) -> Vec<(usize, usize)> {
    (0..r).flat_map(|i| (0..c).map(move |j| (i, j))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_cohort, Schema, SynthConfig};
    use crate::numerics::{Purpose, RngStream};
    use proptest::prelude::*;

    fn full(r: usize, c: usize) -> ScaleGraph {
        let coords = full_grid_coords(r, c);
        build_grid_graph(Mat::zeros((coords.len(), 2)), coords, Scale::Small).unwrap()
    }

    #[test]
    fn small_grid_examples() {
        assert_eq!(full(1, 1).edges.len(), 0);
        assert_eq!(full(2, 2).edges.len(), 6);
        let g = full(3, 3);
        assert_eq!(g.edges.len(), 20);
        assert_eq!(g.degree(4), 8);
        for corner in [0, 2, 6, 8] {
            assert_eq!(g.degree(corner), 3);
        }
    }

    #[test]
    fn formula_matches_enumeration() {
        for r in 1..=6 {
            for c in 1..=6 {
                let coords = full_grid_coords(r, c);
                assert_eq!(full_grid_edge_count(r, c), brute_force_edges(&coords).len());
                assert_eq!(full(r, c).edges.len(), full_grid_edge_count(r, c));
            }
        }
    }

    #[test]
    fn rejects_duplicates_and_row_mismatch() {
        let err = build_grid_graph(Mat::zeros((2, 3)), vec![(0, 0), (0, 0)], Scale::Large);
        assert!(err.unwrap_err().to_string().contains("duplicate"));
        assert!(build_grid_graph(Mat::zeros((3, 3)), vec![(0, 0)], Scale::Large).is_err());
        assert!(build_grid_graph(Mat::zeros((0, 3)), vec![], Scale::Large).is_err());
    }

    #[test]
    fn hole_reduces_neighbour_degrees() {
        let mut coords = full_grid_coords(3, 3);
        coords.remove(4);
        let g = build_grid_graph(Mat::zeros((8, 1)), coords, Scale::Medium).unwrap();
        // corners lose the centre
        assert_eq!(g.degree(0), 2);
        assert_eq!(g.edges.len(), 12);
    }

    #[test]
    fn multiscale_default_patient() {
        let cohort = generate_cohort(
            2,
            &Schema::default(),
            &SynthConfig::default(),
            RngStream::new(1, Purpose::Datagen),
        )
        .unwrap();
        let [s, m, l] = build_multiscale(&cohort.patients[0]).unwrap();
        assert_eq!((s.len(), m.len(), l.len()), (64, 36, 16));
        assert_eq!(build_multiscale(&cohort.patients[0]).unwrap()[0], s);
    }

    #[test]
    fn mean_aggregator_rows() {
        let g = build_grid_graph(Mat::zeros((3, 1)), vec![(0, 0), (0, 1), (5, 5)], Scale::Small).unwrap();
        let p = g.mean_aggregator();
        assert_eq!(p.row(0).to_vec(), vec![0.0, 1.0, 0.0]);
        assert!(p.row(2).iter().all(|&v| v == 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn hole_punched_grids(r in 1usize..9, c in 1usize..9, holes in proptest::collection::vec(any::<bool>(), 64)) {
            let coords: Vec<_> = full_grid_coords(r, c)
                .into_iter()
                .enumerate()
                .filter(|(i, _)| !holes[*i])
                .map(|(_, x)| x)
                .collect();
            prop_assume!(!coords.is_empty());
            let n = coords.len();
            let g = build_grid_graph(Mat::zeros((n, 1)), coords.clone(), Scale::Small).unwrap();
            prop_assert_eq!(&g.adjacency, &g.adjacency.t().to_owned());
            for i in 0..n {
                prop_assert_eq!(g.adjacency[[i, i]], 0.0);
                prop_assert!(g.degree(i) <= 8);
            }
            let mut from_a = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    if g.adjacency[[i, j]] == 1.0 {
                        from_a.push((i, j));
                    }
                }
            }
            prop_assert_eq!(&from_a, &g.edges);
            prop_assert_eq!(&g.edges, &brute_force_edges(&coords));
        }
    }
}
