//! Transport operators and geometry-induced instrument families.
//!
//! The transport operator `P(θ; ŷ)` row-normalizes the aggregator Jacobian
//! evaluated at an exogenous predictor; it is the propagation kernel behind
//! three excluded-instrument families:
//!
//! - multi-step exposure `P^k X` (k ≥ 2), computed by repeated
//!   matrix-vector products,
//! - effective-distance shells: edge frictions `−log(P_ij + ε₀)`, per-source
//!   Dijkstra distances, and unit-width distance buckets,
//! - torsion: wedge non-redundancy `|P_ik − P_ij P_jk|` weighting a two-step
//!   covariate exposure.
//!
//! The one-step menu `[x, Φ(ŷ;θ), ∂θΦ(ŷ;θ)]` is provided alongside, and the
//! full signature assembles any subset of blocks on top of it. For the
//! linear-in-means family `P = G`, so every geometry block reduces to its
//! adjacency-power counterpart.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::{DMatrix, DVector};

use crate::aggregators::{
    dtheta_exposure, exposure, jacobian, quantile_influence, AggregatorSpec, Family, DEFAULT_FD_STEP,
};
use crate::error::{Error, Result};
use crate::netcore::{Network, Panel};
use crate::par;

/// Default friction floor ε₀ inside `−log(P_ij + ε₀)`.
pub const DEFAULT_EPSILON0: f64 = 1e-8;
/// Default multi-step depth K.
pub const DEFAULT_K: usize = 3;
/// Default shell depth H.
pub const DEFAULT_H: usize = 4;

/// Row-normalized influence operator for one group.
#[derive(Debug, Clone)]
pub struct TransportOperator {
    /// Row-stochastic on non-isolates; isolate rows are zero.
    pub p: DMatrix<f64>,
    /// Preference parameter the Jacobian was evaluated with.
    pub theta: f64,
    /// Predictor ŷ used as the evaluation point.
    pub eval_point: DVector<f64>,
    pub family: Family,
    pub isolate_mask: Vec<bool>,
}

impl TransportOperator {
    pub fn n(&self) -> usize {
        self.p.nrows()
    }

    fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let n = self.n();
        (0..n).filter_map(move |j| {
            let w = self.p[(i, j)];
            (w > 0.0).then_some((j, w))
        })
    }
}

/// Builds the transport operator `P(θ; ŷ)` for one group.
///
/// Rows of the aggregator Jacobian (or the quantile influence matrix) at ŷ,
/// normalized to sum to 1; LIM returns `P = G` exactly.
pub fn transport(net: &Network, yhat: &DVector<f64>, spec: &AggregatorSpec) -> Result<TransportOperator> {
    let w = match spec.family {
        Family::Lim => net.weights.clone(),
        Family::Quantile => quantile_influence(net, yhat, spec.theta)?,
        Family::Ces | Family::SmoothMax => jacobian(net, yhat, spec)?,
    };
    let n = net.n;
    let mut p = w;
    for i in 0..n {
        if net.isolate_mask[i] {
            continue;
        }
        let sum: f64 = p.row(i).iter().sum();
        if sum <= 0.0 {
            return Err(Error::Domain(format!(
                "degenerate influence row at node {i}: all weights zero on a non-isolate"
            )));
        }
        if (sum - 1.0).abs() > 1e-12 {
            for j in 0..n {
                p[(i, j)] /= sum;
            }
        }
    }
    Ok(TransportOperator {
        p,
        theta: spec.theta,
        eval_point: yhat.clone(),
        family: spec.family,
        isolate_mask: net.isolate_mask.clone(),
    })
}

/// Multi-step blocks `(P²X, …, P^K X)`, one matrix per k.
///
/// Computed column-by-column with repeated matrix-vector products; `P^k` is
/// never materialized.
pub fn multistep_instruments(op: &TransportOperator, x: &DMatrix<f64>, k: usize) -> Result<Vec<DMatrix<f64>>> {
    if k < 2 {
        return Err(Error::Domain("multi-step depth K must be at least 2".into()));
    }
    let n = op.n();
    if x.nrows() != n {
        return Err(Error::Domain("covariate rows must match node count".into()));
    }
    let p_cols = x.ncols();
    let mut blocks = vec![DMatrix::zeros(n, p_cols); k - 1];
    for c in 0..p_cols {
        let mut v = x.column(c).into_owned();
        v = &op.p * v; // P x
        for step in 2..=k {
            v = &op.p * v; // P^step x
            blocks[step - 2].set_column(c, &v);
        }
    }
    Ok(blocks)
}

#[derive(Copy, Clone, PartialEq)]
struct HeapState {
    dist: f64,
    node: usize,
}

impl Eq for HeapState {}

impl Ord for HeapState {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on distance via reversed comparison
        other.dist.total_cmp(&self.dist)
    }
}

impl PartialOrd for HeapState {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Effective influence distances `d(i,j)`: per-source Dijkstra on edge
/// lengths `max(0, −log(P_ij + ε₀))` over edges with `P_ij > 0`.
///
/// Unreachable pairs get `+∞`. Sources run in parallel.
pub fn effective_distances(op: &TransportOperator, epsilon0: f64) -> Result<DMatrix<f64>> {
    if epsilon0 <= 0.0 {
        return Err(Error::Domain("epsilon0 must be positive".into()));
    }
    let n = op.n();
    let mut adjacency: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    for i in 0..n {
        adjacency.push(
            op.neighbors(i)
                .map(|(j, w)| (j, (-(w + epsilon0).ln()).max(0.0)))
                .collect(),
        );
    }
    let rows = par::map_range(n, |src| dijkstra(&adjacency, src));
    let mut dist = DMatrix::from_element(n, n, f64::INFINITY);
    for (i, row) in rows.into_iter().enumerate() {
        for j in 0..n {
            dist[(i, j)] = row[j];
        }
    }
    Ok(dist)
}

fn dijkstra(adjacency: &[Vec<(usize, f64)>], src: usize) -> Vec<f64> {
    let n = adjacency.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut heap = BinaryHeap::new();
    dist[src] = 0.0;
    heap.push(HeapState { dist: 0.0, node: src });
    while let Some(HeapState { dist: d, node }) = heap.pop() {
        if d > dist[node] {
            continue;
        }
        for &(next, len) in &adjacency[node] {
            let nd = d + len;
            if nd < dist[next] {
                dist[next] = nd;
                heap.push(HeapState { dist: nd, node: next });
            }
        }
    }
    dist
}

/// Shell blocks for h = 2..=H: row i sums `x_j` over nodes j with effective
/// distance in `(h−1, h]`. Empty shells give zero rows.
pub fn shell_instruments(distances: &DMatrix<f64>, x: &DMatrix<f64>, h: usize) -> Result<Vec<DMatrix<f64>>> {
    if h < 2 {
        return Err(Error::Domain("shell depth H must be at least 2".into()));
    }
    let n = distances.nrows();
    if x.nrows() != n {
        return Err(Error::Domain("covariate rows must match node count".into()));
    }
    let p = x.ncols();
    let mut blocks = vec![DMatrix::zeros(n, p); h - 1];
    for i in 0..n {
        for j in 0..n {
            let d = distances[(i, j)];
            if !d.is_finite() || d <= 1.0 {
                continue;
            }
            // bucket (h-1, h]: ceil(d) = h for d in that interval
            let bucket = d.ceil() as usize;
            if (2..=h).contains(&bucket) {
                for c in 0..p {
                    blocks[bucket - 2][(i, c)] += x[(j, c)];
                }
            }
        }
    }
    Ok(blocks)
}

/// Torsion-weighted two-step exposure
/// `Z^τ_i = Σ_{j,k} P_ij P_jk |P_ik − P_ij P_jk| x_k`, iterating only over
/// wedges with `P_ij > 0` and `P_jk > 0`. Nodes run in parallel.
pub fn torsion_instrument(op: &TransportOperator, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = op.n();
    if x.nrows() != n {
        return Err(Error::Domain("covariate rows must match node count".into()));
    }
    let p = x.ncols();
    let neighbor_lists: Vec<Vec<(usize, f64)>> = (0..n).map(|i| op.neighbors(i).collect()).collect();
    let rows = par::map_range(n, |i| {
        let mut acc = vec![0.0; p];
        for &(j, pij) in &neighbor_lists[i] {
            for &(k, pjk) in &neighbor_lists[j] {
                let tau = (op.p[(i, k)] - pij * pjk).abs();
                let w = pij * pjk * tau;
                if w > 0.0 {
                    for c in 0..p {
                        acc[c] += w * x[(k, c)];
                    }
                }
            }
        }
        acc
    });
    let mut z = DMatrix::zeros(n, p);
    for (i, row) in rows.into_iter().enumerate() {
        for c in 0..p {
            z[(i, c)] = row[c];
        }
    }
    Ok(z)
}

/// Hop-distance-2 adjacency on G (exactly two directed hops, not 0 or 1),
/// row-normalized; multiplied into X.
pub fn adjacency_shell2(net: &Network, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = net.n;
    if x.nrows() != n {
        return Err(Error::Domain("covariate rows must match node count".into()));
    }
    let p = x.ncols();
    let mut z = DMatrix::zeros(n, p);
    for i in 0..n {
        let mut at_two = vec![false; n];
        for (j, _) in net.neighbors(i) {
            for (k, _) in net.neighbors(j) {
                at_two[k] = true;
            }
        }
        at_two[i] = false;
        for (j, _) in net.neighbors(i) {
            at_two[j] = false;
        }
        let count = at_two.iter().filter(|&&b| b).count();
        if count == 0 {
            continue;
        }
        let w = 1.0 / count as f64;
        for (k, flag) in at_two.iter().enumerate() {
            if *flag {
                for c in 0..p {
                    z[(i, c)] += w * x[(k, c)];
                }
            }
        }
    }
    Ok(z)
}

/// One-step menu `[x_i, Φ_i(ŷ;θ), ∂θΦ_i(ŷ;θ)]` with column names.
///
/// The ∂θ column is omitted for LIM and quantile norms.
pub fn bruz_menu(
    net: &Network,
    yhat: &DVector<f64>,
    x: &DMatrix<f64>,
    x_names: &[String],
    spec: &AggregatorSpec,
) -> Result<(DMatrix<f64>, Vec<String>)> {
    let n = net.n;
    if x.nrows() != n {
        return Err(Error::Domain("covariate rows must match node count".into()));
    }
    let phi = exposure(net, yhat, spec)?.values;
    let has_dtheta = matches!(spec.family, Family::Ces | Family::SmoothMax);
    let p = x.ncols();
    let cols = p + 1 + usize::from(has_dtheta);
    let mut menu = DMatrix::zeros(n, cols);
    for c in 0..p {
        menu.set_column(c, &x.column(c).into_owned());
    }
    menu.set_column(p, &phi);
    let mut names: Vec<String> = x_names.to_vec();
    names.push("phi".into());
    if has_dtheta {
        let d = dtheta_exposure(net, yhat, spec, DEFAULT_FD_STEP)?;
        menu.set_column(p + 1, &d.values);
        names.push("dphi".into());
    }
    Ok((menu, names))
}

/// Which geometry blocks to stack on top of the one-step menu.
#[derive(Debug, Clone, Copy, Default)]
pub struct GeoBlocks {
    /// Multi-step `P^k X` for k = 2..=K.
    pub steps: bool,
    /// Effective-distance shells for h = 2..=H.
    pub shells: bool,
    /// Torsion-weighted two-step exposure.
    pub torsion: bool,
    /// Hop-2 adjacency block Shell₂(G)X (row-normalized).
    pub adjacency_shell2: bool,
    /// Central finite difference ∂θ(P²X).
    pub dtheta_step2: bool,
}

impl GeoBlocks {
    /// Poster configuration used in the dominance experiments:
    /// P²X, its θ-derivative, and the hop-2 adjacency block.
    pub fn preset() -> Self {
        GeoBlocks {
            steps: true,
            dtheta_step2: true,
            adjacency_shell2: true,
            ..Default::default()
        }
    }

    /// Every block: steps, shells, torsion (plus the preset extras).
    pub fn full() -> Self {
        GeoBlocks {
            steps: true,
            shells: true,
            torsion: true,
            adjacency_shell2: true,
            dtheta_step2: true,
        }
    }

    pub fn none() -> Self {
        GeoBlocks::default()
    }
}

/// Per-node stacked instrument signature: the one-step block plus selected
/// geometry blocks, with depth and floor parameters recorded.
#[derive(Debug, Clone)]
pub struct InstrumentSignature {
    /// Predicted peer norm Φ(ŷ;θ).
    pub phi: DVector<f64>,
    /// ∂θΦ(ŷ;θ); absent for LIM/quantile.
    pub dphi: Option<DVector<f64>>,
    /// `P^k X` for k = 2..=K (empty unless requested).
    pub steps: Vec<DMatrix<f64>>,
    /// Effective-distance shell sums for h = 2..=H (empty unless requested).
    pub shells: Vec<DMatrix<f64>>,
    pub torsion: Option<DMatrix<f64>>,
    pub adjacency_shell2: Option<DMatrix<f64>>,
    pub dtheta_step2: Option<DMatrix<f64>>,
    pub k_depth: usize,
    pub h_depth: usize,
    pub epsilon0: f64,
    pub x_names: Vec<String>,
}

impl InstrumentSignature {
    /// Stacks the excluded columns `[phi, dphi?, steps…, shells…, torsion?,
    /// adj2?, dstep2?]` into one matrix with header names
    /// (`step2_x1`, `shell3_x2`, `torsion_x1`, ...).
    pub fn excluded_matrix(&self) -> (DMatrix<f64>, Vec<String>) {
        let n = self.phi.len();
        let mut cols: Vec<DVector<f64>> = vec![self.phi.clone()];
        let mut names: Vec<String> = vec!["phi".into()];
        if let Some(ref d) = self.dphi {
            cols.push(d.clone());
            names.push("dphi".into());
        }
        let mut push_block = |block: &DMatrix<f64>, prefix: &str, x_names: &[String]| {
            for c in 0..block.ncols() {
                cols.push(block.column(c).into_owned());
                names.push(format!("{prefix}_{}", x_names[c]));
            }
        };
        for (idx, block) in self.steps.iter().enumerate() {
            push_block(block, &format!("step{}", idx + 2), &self.x_names);
        }
        for (idx, block) in self.shells.iter().enumerate() {
            push_block(block, &format!("shell{}", idx + 2), &self.x_names);
        }
        if let Some(ref t) = self.torsion {
            push_block(t, "torsion", &self.x_names);
        }
        if let Some(ref a) = self.adjacency_shell2 {
            push_block(a, "adj2", &self.x_names);
        }
        if let Some(ref d) = self.dtheta_step2 {
            push_block(d, "dstep2", &self.x_names);
        }
        let mut m = DMatrix::zeros(n, cols.len());
        for (c, col) in cols.iter().enumerate() {
            m.set_column(c, col);
        }
        (m, names)
    }

    pub fn n_excluded(&self) -> usize {
        let p = self.x_names.len();
        1 + usize::from(self.dphi.is_some())
            + self.steps.len() * p
            + self.shells.len() * p
            + self.torsion.as_ref().map_or(0, |_| p)
            + self.adjacency_shell2.as_ref().map_or(0, |_| p)
            + self.dtheta_step2.as_ref().map_or(0, |_| p)
    }
}

/// Assembles the geometry-augmented signature for one group.
///
/// `include` chooses the blocks; with everything off the signature carries
/// exactly the one-step menu columns.
#[allow(clippy::too_many_arguments)]
pub fn geo_menu(
    net: &Network,
    yhat: &DVector<f64>,
    x: &DMatrix<f64>,
    x_names: &[String],
    spec: &AggregatorSpec,
    k: usize,
    h: usize,
    epsilon0: f64,
    include: GeoBlocks,
) -> Result<InstrumentSignature> {
    let phi = exposure(net, yhat, spec)?.values;
    let smooth_theta = matches!(spec.family, Family::Ces | Family::SmoothMax);
    let dphi = if smooth_theta {
        Some(dtheta_exposure(net, yhat, spec, DEFAULT_FD_STEP)?.values)
    } else {
        None
    };

    let need_transport = include.steps || include.shells || include.torsion || include.dtheta_step2;
    let op = if need_transport {
        Some(transport(net, yhat, spec)?)
    } else {
        None
    };

    let steps = if include.steps {
        multistep_instruments(op.as_ref().unwrap(), x, k)?
    } else {
        Vec::new()
    };
    let shells = if include.shells {
        let dist = effective_distances(op.as_ref().unwrap(), epsilon0)?;
        shell_instruments(&dist, x, h)?
    } else {
        Vec::new()
    };
    let torsion = if include.torsion {
        Some(torsion_instrument(op.as_ref().unwrap(), x)?)
    } else {
        None
    };
    let adjacency = if include.adjacency_shell2 {
        Some(adjacency_shell2(net, x)?)
    } else {
        None
    };
    let dtheta_step2 = if include.dtheta_step2 && smooth_theta {
        Some(dtheta_step2_block(net, yhat, x, spec)?)
    } else {
        None
    };

    Ok(InstrumentSignature {
        phi,
        dphi,
        steps,
        shells,
        torsion,
        adjacency_shell2: adjacency,
        dtheta_step2,
        k_depth: k,
        h_depth: h,
        epsilon0,
        x_names: x_names.to_vec(),
    })
}

/// Stacks each group's excluded signature columns over a panel, in global
/// node order. Column names are shared across groups.
#[allow(clippy::too_many_arguments)]
pub fn panel_excluded(
    panel: &Panel,
    yhat: &nalgebra::DVector<f64>,
    spec: &AggregatorSpec,
    k: usize,
    h: usize,
    epsilon0: f64,
    include: GeoBlocks,
) -> Result<(DMatrix<f64>, Vec<String>)> {
    let mut stacked: Option<DMatrix<f64>> = None;
    let mut names: Vec<String> = Vec::new();
    for (g, net) in panel.groups.iter().enumerate() {
        let start = panel.offsets[g];
        let local_yhat = panel.group_slice(yhat, g);
        let local_x = panel.x.rows(start, net.n).into_owned();
        let sig = geo_menu(
            net,
            &local_yhat,
            &local_x,
            &panel.x_names,
            spec,
            k,
            h,
            epsilon0,
            include,
        )?;
        let (m, cols) = sig.excluded_matrix();
        let total = panel.n_nodes();
        let dst = stacked.get_or_insert_with(|| DMatrix::zeros(total, m.ncols()));
        dst.view_mut((start, 0), (net.n, m.ncols())).copy_from(&m);
        if names.is_empty() {
            names = cols;
        }
    }
    match stacked {
        Some(m) => Ok((m, names)),
        None => Err(Error::Domain("panel has no groups".into())),
    }
}

/// Stacks the full one-step menu `[x, Φ, ∂θΦ]` over a panel.
pub fn panel_bruz(
    panel: &Panel,
    yhat: &nalgebra::DVector<f64>,
    spec: &AggregatorSpec,
) -> Result<(DMatrix<f64>, Vec<String>)> {
    let mut stacked: Option<DMatrix<f64>> = None;
    let mut names: Vec<String> = Vec::new();
    for (g, net) in panel.groups.iter().enumerate() {
        let start = panel.offsets[g];
        let local_yhat = panel.group_slice(yhat, g);
        let local_x = panel.x.rows(start, net.n).into_owned();
        let (m, cols) = bruz_menu(net, &local_yhat, &local_x, &panel.x_names, spec)?;
        let total = panel.n_nodes();
        let dst = stacked.get_or_insert_with(|| DMatrix::zeros(total, m.ncols()));
        dst.view_mut((start, 0), (net.n, m.ncols())).copy_from(&m);
        if names.is_empty() {
            names = cols;
        }
    }
    match stacked {
        Some(m) => Ok((m, names)),
        None => Err(Error::Domain("panel has no groups".into())),
    }
}

/// Central finite difference of `P(θ)²X` in θ, step `1e-4·max(1,|θ|)`.
fn dtheta_step2_block(
    net: &Network,
    yhat: &DVector<f64>,
    x: &DMatrix<f64>,
    spec: &AggregatorSpec,
) -> Result<DMatrix<f64>> {
    let theta = spec.theta;
    let h = DEFAULT_FD_STEP * theta.abs().max(1.0);
    let eval = |t: f64| -> Result<DMatrix<f64>> {
        let op = transport(net, yhat, &spec.with_theta(t)?)?;
        Ok(multistep_instruments(&op, x, 2)?.remove(0))
    };
    let up_ok = spec.theta_in_domain(theta + h);
    let dn_ok = spec.theta_in_domain(theta - h);
    match (up_ok, dn_ok) {
        (true, true) => Ok((eval(theta + h)? - eval(theta - h)?) / (2.0 * h)),
        (true, false) => Ok((eval(theta + h)? - eval(theta)?) / h),
        (false, true) => Ok((eval(theta)? - eval(theta - h)?) / h),
        (false, false) => Err(Error::Domain(format!(
            "theta {theta} +/- {h} leaves the {} domain on both sides",
            spec.family
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::row_normalize;

    fn random_stochastic(n: usize, seed: u64) -> Network {
        use rand::Rng;
        let mut rng = crate::rng::substream(seed, &[99]);
        let mut raw = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i != j && rng.random::<f64>() < 0.4 {
                    raw[(i, j)] = rng.random::<f64>() + 0.05;
                }
            }
        }
        row_normalize(raw).unwrap()
    }

    #[test]
    fn lim_transport_is_adjacency() {
        let net = random_stochastic(12, 3);
        let yhat = DVector::from_fn(12, |i, _| i as f64 * 0.3 - 1.0);
        let op = transport(&net, &yhat, &AggregatorSpec::lim()).unwrap();
        assert_eq!(op.p, net.weights);
    }

    #[test]
    fn smooth_max_kappa_to_zero_recovers_adjacency() {
        let net = random_stochastic(10, 4);
        let yhat = DVector::from_fn(10, |i, _| (i as f64).sin());
        let spec = AggregatorSpec::smooth_max(1e-6).unwrap();
        let op = transport(&net, &yhat, &spec).unwrap();
        assert!((&op.p - &net.weights).abs().max() < 1e-4);
    }

    #[test]
    fn ces_beta_one_transport_equals_adjacency() {
        let net = random_stochastic(9, 5);
        let yhat = DVector::from_fn(9, |i, _| 1.0 + i as f64 * 0.2);
        let spec = AggregatorSpec::ces(1.0, 0.0).unwrap();
        let op = transport(&net, &yhat, &spec).unwrap();
        assert_eq!(op.p, net.weights);
    }

    #[test]
    fn transport_rows_sum_to_one() {
        let net = random_stochastic(11, 6);
        let yhat = DVector::from_fn(11, |i, _| 0.5 + 0.1 * i as f64);
        for spec in [
            AggregatorSpec::lim(),
            AggregatorSpec::ces(1.7, 0.5).unwrap(),
            AggregatorSpec::smooth_max(2.4).unwrap(),
            AggregatorSpec::quantile(0.5).unwrap(),
        ] {
            let op = transport(&net, &yhat, &spec).unwrap();
            for i in 0..11 {
                if net.isolate_mask[i] {
                    continue;
                }
                let s: f64 = op.p.row(i).iter().sum();
                assert!((s - 1.0).abs() <= 1e-12, "{:?} row {i}: {s}", spec.family);
            }
        }
    }

    #[test]
    fn multistep_matches_dense_powers() {
        let net = random_stochastic(8, 7);
        let yhat = DVector::from_fn(8, |i, _| 1.0 + 0.25 * i as f64);
        let spec = AggregatorSpec::ces(1.4, 0.0).unwrap();
        let op = transport(&net, &yhat, &spec).unwrap();
        let x = DMatrix::from_fn(8, 2, |i, j| if j == 0 { 1.0 } else { (i as f64) - 3.0 });
        let blocks = multistep_instruments(&op, &x, 4).unwrap();
        let mut pk = op.p.clone();
        for block in &blocks {
            pk = &op.p * pk; // P^2, then P^3, ...
            let direct = &pk * &x;
            assert!((block - direct).abs().max() < 1e-10);
        }
    }

    #[test]
    fn multistep_star_peripherals_get_hub_averages() {
        // center 0, peripherals 1..=4; peripherals point at the hub; hub
        // spreads weight equally. (P^2 X)_peripheral = hub row of P X.
        let m = 4;
        let n = m + 1;
        let mut raw = DMatrix::zeros(n, n);
        for i in 1..n {
            raw[(i, 0)] = 1.0;
            raw[(0, i)] = 1.0;
        }
        let net = row_normalize(raw).unwrap();
        let yhat = DVector::from_element(n, 1.0);
        let op = transport(&net, &yhat, &AggregatorSpec::lim()).unwrap();
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64);
        let blocks = multistep_instruments(&op, &x, 2).unwrap();
        let hub_avg: f64 = (1..n).map(|i| x[(i, 0)] / m as f64).sum();
        for i in 1..n {
            assert!((blocks[0][(i, 0)] - hub_avg).abs() < 1e-12);
        }
    }

    #[test]
    fn multistep_constant_column_stays_one() {
        let net = random_stochastic(10, 8);
        let yhat = DVector::from_element(10, 2.0);
        let op = transport(&net, &yhat, &AggregatorSpec::lim()).unwrap();
        let x = DMatrix::from_element(10, 1, 1.0);
        let blocks = multistep_instruments(&op, &x, 3).unwrap();
        // rows reachable entirely through non-isolates keep the value 1
        if net.isolate_mask.iter().all(|&b| !b) {
            for block in blocks {
                assert!((block.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max)) < 1e-12);
            }
        }
    }

    #[test]
    fn distances_edge_cases() {
        // single edge with P = 1: friction clamps to 0
        let raw = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let net = row_normalize(raw).unwrap();
        let yhat = DVector::from_element(2, 1.0);
        let op = transport(&net, &yhat, &AggregatorSpec::lim()).unwrap();
        let d = effective_distances(&op, DEFAULT_EPSILON0).unwrap();
        assert_eq!(d[(0, 1)], 0.0);
        assert!(d[(1, 0)].is_infinite());

        // two-hop chain with P = 0.5 each
        let raw = DMatrix::from_row_slice(
            3,
            3,
            &[0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
        );
        let net = row_normalize(raw).unwrap();
        let yhat = DVector::from_element(3, 1.0);
        let op = transport(&net, &yhat, &AggregatorSpec::lim()).unwrap();
        let d = effective_distances(&op, DEFAULT_EPSILON0).unwrap();
        let ell = -(0.5_f64 + DEFAULT_EPSILON0).ln();
        // direct 0->2 edge has P=0.5; path through 1 costs ell + 0 (P_12 = 1)
        assert!((d[(0, 1)] - ell).abs() < 1e-12);
        let two_hop = 2.0 * ell;
        let raw2 = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.0, 1.0, 0.0, 0.0, //
                0.0, 0.0, 1.0, 0.0, //
                0.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, 0.0,
            ],
        );
        // chain 0 -> 1 -> 2 with split weights to force P = 0.5 per hop
        let mut raw2 = raw2;
        raw2[(0, 3)] = 1.0; // 0 splits between 1 and 3
        raw2[(1, 3)] = 1.0; // 1 splits between 2 and 3
        let net2 = row_normalize(raw2).unwrap();
        let yhat2 = DVector::from_element(4, 1.0);
        let op2 = transport(&net2, &yhat2, &AggregatorSpec::lim()).unwrap();
        let d2 = effective_distances(&op2, DEFAULT_EPSILON0).unwrap();
        assert!((d2[(0, 2)] - two_hop).abs() < 1e-12);
    }

    #[test]
    fn distances_triangle_inequality() {
        let net = random_stochastic(15, 9);
        let yhat = DVector::from_fn(15, |i, _| 1.0 + 0.1 * i as f64);
        let op = transport(&net, &yhat, &AggregatorSpec::ces(1.5, 0.0).unwrap()).unwrap();
        let d = effective_distances(&op, DEFAULT_EPSILON0).unwrap();
        for i in 0..15 {
            for j in 0..15 {
                for k in 0..15 {
                    if d[(i, k)].is_finite() && d[(k, j)].is_finite() {
                        assert!(d[(i, j)] <= d[(i, k)] + d[(k, j)] + 1e-12);
                    }
                }
            }
        }
        assert!(d.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn shells_star_hub_bucketing() {
        // hub 0 spreads over m peripherals: all at distance -log(1/m + eps)
        let m = 5;
        let n = m + 1;
        let mut raw = DMatrix::zeros(n, n);
        for i in 1..n {
            raw[(0, i)] = 1.0;
            raw[(i, 0)] = 1.0;
        }
        let net = row_normalize(raw).unwrap();
        let yhat = DVector::from_element(n, 1.0);
        let op = transport(&net, &yhat, &AggregatorSpec::lim()).unwrap();
        let d = effective_distances(&op, DEFAULT_EPSILON0).unwrap();
        let expected = -((1.0 / m as f64) + DEFAULT_EPSILON0).ln();
        let bucket = expected.ceil() as usize; // 2 for m = 5
        assert_eq!(bucket, 2);
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64);
        let blocks = shell_instruments(&d, &x, 4).unwrap();
        let hub_shell2 = blocks[0][(0, 0)];
        let sum_peripherals: f64 = (1..n).map(|i| i as f64).sum();
        assert!((hub_shell2 - sum_peripherals).abs() < 1e-12);
        // nothing for the hub beyond that bucket
        assert_eq!(blocks[1][(0, 0)], 0.0);
        assert_eq!(blocks[2][(0, 0)], 0.0);
    }

    #[test]
    fn shells_empty_bucket_is_zero_row() {
        let raw = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let net = row_normalize(raw).unwrap();
        let yhat = DVector::from_element(2, 1.0);
        let op = transport(&net, &yhat, &AggregatorSpec::lim()).unwrap();
        let d = effective_distances(&op, DEFAULT_EPSILON0).unwrap();
        let x = DMatrix::from_element(2, 1, 3.0);
        let blocks = shell_instruments(&d, &x, 3).unwrap();
        // edges have P=1 so friction 0; nobody sits in (1,2] or (2,3]
        assert!(blocks.iter().all(|b| b.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn torsion_multiplicative_wedge_vanishes() {
        // P_02 = P_01 * P_12 exactly; the only wedge from 0 is (0,1,2).
        let mut p = DMatrix::zeros(3, 3);
        p[(0, 1)] = 0.5;
        p[(0, 2)] = 0.5;
        p[(1, 2)] = 1.0;
        let op = TransportOperator {
            p,
            theta: 0.0,
            eval_point: DVector::zeros(3),
            family: Family::Lim,
            isolate_mask: vec![false, false, true],
        };
        let x = DMatrix::from_fn(3, 1, |i, _| 1.0 + i as f64);
        let z = torsion_instrument(&op, &x).unwrap();
        assert_eq!(z[(0, 0)], 0.0);
    }

    #[test]
    fn torsion_matches_brute_force_on_cycle() {
        // complete 3-graph with uniform 0.5 off-diagonals
        let raw = DMatrix::from_row_slice(
            3,
            3,
            &[0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0],
        );
        let net = row_normalize(raw).unwrap();
        let yhat = DVector::from_element(3, 1.0);
        let op = transport(&net, &yhat, &AggregatorSpec::lim()).unwrap();
        let x = DMatrix::from_fn(3, 2, |i, j| (i + j) as f64 - 1.0);
        let z = torsion_instrument(&op, &x).unwrap();
        let brute = torsion_brute_force(&op.p, &x);
        assert!((z - brute).abs().max() < 1e-12);
    }

    #[test]
    fn torsion_empty_network_is_zero() {
        let net = row_normalize(DMatrix::zeros(4, 4)).unwrap();
        let yhat = DVector::from_element(4, 1.0);
        let op = transport(&net, &yhat, &AggregatorSpec::lim()).unwrap();
        let x = DMatrix::from_element(4, 1, 2.0);
        let z = torsion_instrument(&op, &x).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    /// O(n³) reference used by tests and the acceptance suite.
    pub fn torsion_brute_force(p: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
        let n = p.nrows();
        let m = x.ncols();
        let mut z = DMatrix::zeros(n, m);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let w = p[(i, j)] * p[(j, k)] * (p[(i, k)] - p[(i, j)] * p[(j, k)]).abs();
                    for c in 0..m {
                        z[(i, c)] += w * x[(k, c)];
                    }
                }
            }
        }
        z
    }

    #[test]
    fn bruz_menu_shapes_and_reduction() {
        let net = random_stochastic(7, 11);
        let yhat = DVector::from_fn(7, |i, _| 1.0 + 0.3 * i as f64);
        let x = DMatrix::from_fn(7, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let names = vec!["const".to_string(), "x1".to_string()];

        // LIM menu reduces to [x, G yhat]
        let (menu, cols) = bruz_menu(&net, &yhat, &x, &names, &AggregatorSpec::lim()).unwrap();
        assert_eq!(cols, vec!["const", "x1", "phi"]);
        let g_yhat = &net.weights * &yhat;
        assert!((menu.column(2).into_owned() - g_yhat).abs().max() < 1e-14);

        // CES phi column matches the exposure entry point exactly
        let spec = AggregatorSpec::ces(1.2, 0.0).unwrap();
        let (menu_ces, cols_ces) = bruz_menu(&net, &yhat, &x, &names, &spec).unwrap();
        assert_eq!(cols_ces.len(), 4);
        let phi = exposure(&net, &yhat, &spec).unwrap().values;
        assert_eq!(menu_ces.column(2).into_owned(), phi);
    }

    #[test]
    fn geo_menu_lim_steps_only() {
        let net = random_stochastic(9, 12);
        let yhat = DVector::from_fn(9, |i, _| 0.2 * i as f64);
        let x = DMatrix::from_fn(9, 2, |i, j| if j == 0 { 1.0 } else { (i as f64).cos() });
        let names = vec!["const".to_string(), "x1".to_string()];
        let include = GeoBlocks {
            steps: true,
            ..Default::default()
        };
        let sig = geo_menu(
            &net,
            &yhat,
            &x,
            &names,
            &AggregatorSpec::lim(),
            2,
            DEFAULT_H,
            DEFAULT_EPSILON0,
            include,
        )
        .unwrap();
        // signature = [phi, G^2 X]; phi = G yhat for LIM and no dphi
        assert!(sig.dphi.is_none());
        assert_eq!(sig.steps.len(), 1);
        let g2x = &net.weights * (&net.weights * &x);
        assert!((&sig.steps[0] - &g2x).abs().max() < 1e-12);
        let (m, names) = sig.excluded_matrix();
        assert_eq!(names, vec!["phi", "step2_const", "step2_x1"]);
        assert_eq!(m.ncols(), 3);
    }

    #[test]
    fn geo_menu_empty_equals_bruz() {
        let net = random_stochastic(8, 13);
        let yhat = DVector::from_fn(8, |i, _| 1.0 + 0.1 * i as f64);
        let x = DMatrix::from_fn(8, 2, |i, j| if j == 0 { 1.0 } else { i as f64 * 0.5 });
        let names = vec!["const".to_string(), "x1".to_string()];
        let spec = AggregatorSpec::ces(1.6, 0.0).unwrap();
        let sig = geo_menu(
            &net,
            &yhat,
            &x,
            &names,
            &spec,
            DEFAULT_K,
            DEFAULT_H,
            DEFAULT_EPSILON0,
            GeoBlocks::none(),
        )
        .unwrap();
        let (excl, excl_names) = sig.excluded_matrix();
        let (bruz, bruz_names) = bruz_menu(&net, &yhat, &x, &names, &spec).unwrap();
        // excluded signature == bruz menu minus its leading x block
        assert_eq!(excl_names, bruz_names[2..].to_vec());
        let p = x.ncols();
        for c in 0..excl.ncols() {
            assert_eq!(
                excl.column(c).into_owned(),
                bruz.column(p + c).into_owned()
            );
        }
    }

    #[test]
    fn geo_menu_preset_column_count() {
        let net = random_stochastic(10, 14);
        let yhat = DVector::from_fn(10, |i, _| 1.5 + 0.05 * i as f64);
        let p = 2;
        let x = DMatrix::from_fn(10, p, |i, j| if j == 0 { 1.0 } else { (i as f64).sin() });
        let names = vec!["const".to_string(), "x1".to_string()];
        let spec = AggregatorSpec::ces(1.2, 0.0).unwrap();
        let sig = geo_menu(
            &net,
            &yhat,
            &x,
            &names,
            &spec,
            2,
            DEFAULT_H,
            DEFAULT_EPSILON0,
            GeoBlocks::preset(),
        )
        .unwrap();
        // 2 one-step columns + P^2X (p) + dtheta(P^2X) (p) + Shell2(G)X (p)
        assert_eq!(sig.n_excluded(), 2 + 3 * p);
        let (m, _) = sig.excluded_matrix();
        assert_eq!(m.ncols(), 2 + 3 * p);
    }

    #[test]
    fn full_signature_column_count_matches_contract() {
        let net = random_stochastic(12, 15);
        let yhat = DVector::from_fn(12, |i, _| 1.0 + 0.2 * i as f64);
        let p = 2;
        let x = DMatrix::from_fn(12, p, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let names = vec!["const".to_string(), "x1".to_string()];
        let spec = AggregatorSpec::ces(1.4, 0.0).unwrap();
        let (k, h) = (3, 4);
        let include = GeoBlocks {
            steps: true,
            shells: true,
            torsion: true,
            ..Default::default()
        };
        let sig = geo_menu(&net, &yhat, &x, &names, &spec, k, h, DEFAULT_EPSILON0, include).unwrap();
        // column count = 2 + (K-1)p + (H-1)p + p
        assert_eq!(sig.n_excluded(), 2 + (k - 1) * p + (h - 1) * p + p);
        let (m, _) = sig.excluded_matrix();
        assert!(m.iter().all(|v| v.is_finite()));
    }
}
