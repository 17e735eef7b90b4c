//! Grouped network data: interaction weights, covariates, outcomes.
//!
//! A [`Network`] holds one group's row-stochastic interaction matrix; a
//! [`Panel`] stacks the groups together with covariates, optional outcomes,
//! and cluster labels. File formats:
//!
//! - edge CSV with header `group,src,dst,weight`,
//! - node CSV with header `group,node,<x-names...>[,y][,cluster]`.
//!
//! Group and node labels are opaque strings mapped to dense indices; the
//! mapping is retained on the panel so outputs can be labeled.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Row sums within this tolerance of 1 count as already normalized and are
/// left untouched, which keeps emit/reload cycles bit-identical.
const ROW_SUM_TOL: f64 = 1e-12;

/// One group's interaction structure.
#[derive(Debug, Clone)]
pub struct Network {
    /// Dense group index within the panel.
    pub group_id: usize,
    /// Node count.
    pub n: usize,
    /// Nonnegative weights with zero diagonal; non-isolate rows sum to 1.
    pub weights: DMatrix<f64>,
    /// True once row normalization has run.
    pub row_normalized: bool,
    /// True where the row sum is zero (no peers).
    pub isolate_mask: Vec<bool>,
}

impl Network {
    /// Validates and row-normalizes a raw weight matrix.
    pub fn new(group_id: usize, raw: DMatrix<f64>) -> Result<Self> {
        let mut net = row_normalize(raw)?;
        net.group_id = group_id;
        Ok(net)
    }

    /// Out-neighbors of `i`: `(j, g_ij)` pairs with positive weight.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let n = self.n;
        (0..n).filter_map(move |j| {
            let w = self.weights[(i, j)];
            (w > 0.0).then_some((j, w))
        })
    }

    pub fn n_isolates(&self) -> usize {
        self.isolate_mask.iter().filter(|&&b| b).count()
    }
}

/// Row-normalizes a square nonnegative matrix with zero diagonal.
///
/// Non-isolate rows are scaled to sum to 1; all-zero rows are kept zero and
/// flagged in the isolate mask. Rows already summing to 1 within 1e-12 are
/// left bitwise unchanged so that normalization is idempotent.
pub fn row_normalize(raw: DMatrix<f64>) -> Result<Network> {
    if raw.nrows() != raw.ncols() {
        return Err(Error::Domain(format!(
            "weight matrix must be square, got {}x{}",
            raw.nrows(),
            raw.ncols()
        )));
    }
    let n = raw.nrows();
    let mut weights = raw;
    for i in 0..n {
        if weights[(i, i)] != 0.0 {
            return Err(Error::Domain(format!("self-loop at node {i}")));
        }
        for j in 0..n {
            let w = weights[(i, j)];
            if w < 0.0 || !w.is_finite() {
                return Err(Error::Domain(format!(
                    "negative or non-finite weight {w} at ({i},{j})"
                )));
            }
        }
    }
    let mut isolate_mask = vec![false; n];
    for i in 0..n {
        let sum: f64 = weights.row(i).iter().sum();
        if sum == 0.0 {
            isolate_mask[i] = true;
        } else if (sum - 1.0).abs() > ROW_SUM_TOL {
            for j in 0..n {
                weights[(i, j)] /= sum;
            }
        }
    }
    Ok(Network {
        group_id: 0,
        n,
        weights,
        row_normalized: true,
        isolate_mask,
    })
}

/// Stacked multi-group data set.
#[derive(Debug, Clone)]
pub struct Panel {
    pub groups: Vec<Network>,
    /// Global index of each group's first node; nodes are stored group-major.
    pub offsets: Vec<usize>,
    /// Covariates, N×p, including an explicit intercept column if the model
    /// wants one (nothing is added implicitly).
    pub x: DMatrix<f64>,
    pub x_names: Vec<String>,
    /// Outcomes; absent until loaded or simulated.
    pub y: Option<DVector<f64>>,
    /// Dense cluster index per node (defaults to the group index).
    pub cluster_id: Vec<usize>,
    pub group_labels: Vec<String>,
    /// Node labels in global order.
    pub node_labels: Vec<String>,
    pub cluster_labels: Vec<String>,
}

impl Panel {
    pub fn n_nodes(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.ncols()
    }

    pub fn global_index(&self, group: usize, local: usize) -> usize {
        self.offsets[group] + local
    }

    /// Stacked isolate mask in global node order.
    pub fn isolate_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.n_nodes());
        for net in &self.groups {
            mask.extend_from_slice(&net.isolate_mask);
        }
        mask
    }

    /// Group slice of a stacked per-node vector.
    pub fn group_slice<'a>(&self, v: &'a DVector<f64>, group: usize) -> DVector<f64> {
        let start = self.offsets[group];
        let n = self.groups[group].n;
        DVector::from_iterator(n, (0..n).map(|i| v[start + i]))
    }

    /// Errors unless the stacked covariate matrix has full column rank.
    pub fn check_full_rank(&self) -> Result<()> {
        check_full_rank(&self.x, "panel covariates")
    }

    /// Builds a panel from already-normalized per-group parts. Covariate rows
    /// must be stacked in the same group-major order as the networks.
    pub fn from_parts(
        groups: Vec<Network>,
        x: DMatrix<f64>,
        x_names: Vec<String>,
        y: Option<DVector<f64>>,
    ) -> Result<Self> {
        let mut offsets = Vec::with_capacity(groups.len());
        let mut total = 0usize;
        for net in &groups {
            offsets.push(total);
            total += net.n;
        }
        if x.nrows() != total {
            return Err(Error::Domain(format!(
                "covariate rows ({}) do not match node count ({})",
                x.nrows(),
                total
            )));
        }
        if let Some(ref yv) = y {
            if yv.len() != total {
                return Err(Error::Domain("outcome length mismatch".into()));
            }
        }
        let mut cluster_id = Vec::with_capacity(total);
        let mut node_labels = Vec::with_capacity(total);
        for (g, net) in groups.iter().enumerate() {
            for i in 0..net.n {
                cluster_id.push(g);
                node_labels.push(format!("{g}:{i}"));
            }
        }
        let group_labels: Vec<String> = (0..groups.len()).map(|g| g.to_string()).collect();
        Ok(Panel {
            groups,
            offsets,
            x,
            x_names,
            y,
            cluster_id,
            cluster_labels: group_labels.clone(),
            group_labels,
            node_labels,
        })
    }
}

/// Errors unless `m` has full column rank (column-pivoted QR test).
pub fn check_full_rank(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.nrows() < m.ncols() {
        return Err(Error::Rank(format!(
            "{what}: fewer rows ({}) than columns ({})",
            m.nrows(),
            m.ncols()
        )));
    }
    let qr = m.clone().col_piv_qr();
    let r = qr.r();
    let max_diag = (0..m.ncols())
        .map(|j| r[(j, j)].abs())
        .fold(0.0_f64, f64::max);
    let tol = max_diag * (m.nrows().max(m.ncols()) as f64) * f64::EPSILON;
    for j in 0..m.ncols() {
        if r[(j, j)].abs() <= tol {
            return Err(Error::Rank(format!(
                "{what}: rank deficient ({} columns, pivot {} ~ 0)",
                m.ncols(),
                j
            )));
        }
    }
    Ok(())
}

// ---- Loading -----------------------------------------------------------

/// Options for [`load_panel_opts`].
#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Symmetrize the raw weights (undirected ties) before normalization.
    pub symmetrize: bool,
}

/// Loads a panel from the documented edge and node CSV files.
///
/// Edges are interpreted as directed; see [`load_panel_opts`] for the
/// undirected (symmetrized) convention.
pub fn load_panel(edge_path: &Path, covariate_path: &Path) -> Result<Panel> {
    load_panel_opts(edge_path, covariate_path, LoadOptions::default())
}

pub fn load_panel_opts(edge_path: &Path, covariate_path: &Path, opts: LoadOptions) -> Result<Panel> {
    let nodes = read_node_file(covariate_path)?;
    let edges = read_edge_file(edge_path)?;

    // Group and node label -> dense index maps, in file order of first
    // appearance (covariate file is authoritative for membership).
    let mut group_labels: Vec<String> = Vec::new();
    let mut group_index: HashMap<String, usize> = HashMap::new();
    let mut node_index: HashMap<(usize, String), usize> = HashMap::new();
    let mut members: Vec<Vec<usize>> = Vec::new(); // group -> node-file row ids
    for (row_id, row) in nodes.rows.iter().enumerate() {
        let g = *group_index.entry(row.group.clone()).or_insert_with(|| {
            group_labels.push(row.group.clone());
            members.push(Vec::new());
            group_labels.len() - 1
        });
        let key = (g, row.node.clone());
        if node_index.contains_key(&key) {
            return Err(Error::Parse {
                path: covariate_path.display().to_string(),
                line: row.line,
                msg: format!("duplicate node '{}' in group '{}'", row.node, row.group),
            });
        }
        node_index.insert(key, members[g].len());
        members[g].push(row_id);
    }

    let n_groups = group_labels.len();
    let mut raws: Vec<DMatrix<f64>> = members
        .iter()
        .map(|m| DMatrix::zeros(m.len(), m.len()))
        .collect();

    for edge in &edges {
        let g = *group_index.get(&edge.group).ok_or_else(|| Error::Parse {
            path: edge_path.display().to_string(),
            line: edge.line,
            msg: format!("edge references unknown group '{}'", edge.group),
        })?;
        let missing = |which: &str, label: &str| Error::Parse {
            path: edge_path.display().to_string(),
            line: edge.line,
            msg: format!("edge {which} node '{label}' has no covariate row in group '{}'", edge.group),
        };
        let src = *node_index
            .get(&(g, edge.src.clone()))
            .ok_or_else(|| missing("source", &edge.src))?;
        let dst = *node_index
            .get(&(g, edge.dst.clone()))
            .ok_or_else(|| missing("destination", &edge.dst))?;
        if src == dst {
            return Err(Error::Parse {
                path: edge_path.display().to_string(),
                line: edge.line,
                msg: format!("self-loop on node '{}'", edge.src),
            });
        }
        if edge.weight < 0.0 || !edge.weight.is_finite() {
            return Err(Error::Parse {
                path: edge_path.display().to_string(),
                line: edge.line,
                msg: format!("negative or non-finite weight {}", edge.weight),
            });
        }
        // Repeated edges accumulate.
        raws[g][(src, dst)] += edge.weight;
        if opts.symmetrize {
            raws[g][(dst, src)] += edge.weight;
        }
    }

    let mut groups = Vec::with_capacity(n_groups);
    for (g, raw) in raws.into_iter().enumerate() {
        groups.push(Network::new(g, raw)?);
    }

    // Stack covariates, outcomes, clusters in group-major node order.
    let total: usize = members.iter().map(Vec::len).sum();
    let p = nodes.x_names.len();
    let mut x = DMatrix::zeros(total, p);
    let mut y_vals: Vec<f64> = Vec::new();
    let mut cluster_raw: Vec<Option<String>> = Vec::with_capacity(total);
    let mut node_labels = Vec::with_capacity(total);
    let mut offsets = Vec::with_capacity(n_groups);
    let mut global = 0usize;
    for g in 0..n_groups {
        offsets.push(global);
        for &row_id in &members[g] {
            let row = &nodes.rows[row_id];
            for (j, v) in row.x.iter().enumerate() {
                x[(global, j)] = *v;
            }
            if let Some(v) = row.y {
                y_vals.push(v);
            }
            cluster_raw.push(row.cluster.clone());
            node_labels.push(row.node.clone());
            global += 1;
        }
    }
    let y = if nodes.has_y {
        Some(DVector::from_vec(y_vals))
    } else {
        None
    };

    // Cluster labels default to the group when the column is absent.
    let mut cluster_labels: Vec<String> = Vec::new();
    let mut cluster_map: HashMap<String, usize> = HashMap::new();
    let mut cluster_id = Vec::with_capacity(total);
    let mut idx = 0usize;
    for g in 0..n_groups {
        for _ in &members[g] {
            let label = cluster_raw[idx]
                .clone()
                .unwrap_or_else(|| group_labels[g].clone());
            let c = *cluster_map.entry(label.clone()).or_insert_with(|| {
                cluster_labels.push(label);
                cluster_labels.len() - 1
            });
            cluster_id.push(c);
            idx += 1;
        }
    }

    let panel = Panel {
        groups,
        offsets,
        x,
        x_names: nodes.x_names,
        y,
        cluster_id,
        group_labels,
        node_labels,
        cluster_labels,
    };
    panel.check_full_rank()?;
    Ok(panel)
}

struct EdgeRow {
    group: String,
    src: String,
    dst: String,
    weight: f64,
    line: usize,
}

struct NodeRow {
    group: String,
    node: String,
    x: Vec<f64>,
    y: Option<f64>,
    cluster: Option<String>,
    line: usize,
}

struct NodeFile {
    rows: Vec<NodeRow>,
    x_names: Vec<String>,
    has_y: bool,
}

fn parse_field(path: &Path, line: usize, name: &str, raw: &str) -> Result<f64> {
    raw.trim().parse::<f64>().map_err(|_| Error::Parse {
        path: path.display().to_string(),
        line,
        msg: format!("cannot parse {name} value '{raw}' as a number"),
    })
}

fn read_edge_file(path: &Path) -> Result<Vec<EdgeRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    {
        let headers = reader.headers()?;
        let expected = ["group", "src", "dst", "weight"];
        let got: Vec<&str> = headers.iter().collect();
        if got != expected {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: 1,
                msg: format!("expected header 'group,src,dst,weight', got '{}'", got.join(",")),
            });
        }
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or(0);
        if record.len() != 4 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line,
                msg: format!("expected 4 fields, got {}", record.len()),
            });
        }
        rows.push(EdgeRow {
            group: record[0].to_string(),
            src: record[1].to_string(),
            dst: record[2].to_string(),
            weight: parse_field(path, line, "weight", &record[3])?,
            line,
        });
    }
    Ok(rows)
}

fn read_node_file(path: &Path) -> Result<NodeFile> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if headers.len() < 3 || headers[0] != "group" || headers[1] != "node" {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: "expected header 'group,node,<x-names...>[,y][,cluster]'".into(),
        });
    }
    let cluster_col = headers.iter().position(|h| h == "cluster");
    let y_col = headers.iter().position(|h| h == "y");
    let x_cols: Vec<usize> = (2..headers.len())
        .filter(|j| Some(*j) != cluster_col && Some(*j) != y_col)
        .collect();
    if x_cols.is_empty() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: "node file has no covariate columns".into(),
        });
    }
    let x_names: Vec<String> = x_cols.iter().map(|&j| headers[j].clone()).collect();

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or(0);
        if record.len() != headers.len() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line,
                msg: format!("expected {} fields, got {}", headers.len(), record.len()),
            });
        }
        let mut x = Vec::with_capacity(x_cols.len());
        for &j in &x_cols {
            x.push(parse_field(path, line, &headers[j], &record[j])?);
        }
        let y = match y_col {
            Some(j) => Some(parse_field(path, line, "y", &record[j])?),
            None => None,
        };
        rows.push(NodeRow {
            group: record[0].to_string(),
            node: record[1].to_string(),
            x,
            y,
            cluster: cluster_col.map(|j| record[j].to_string()),
            line,
        });
    }
    Ok(NodeFile {
        rows,
        x_names,
        has_y: y_col.is_some(),
    })
}

// ---- Emission ----------------------------------------------------------

/// Formats a float with 17 significant digits (round-trips through f64).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes the panel back to the documented CSV formats.
///
/// Weights and covariates are written with 17 significant digits so a
/// load/emit/load cycle reproduces them bit-identically.
pub fn save_panel(panel: &Panel, edge_path: &Path, node_path: &Path) -> Result<()> {
    let mut edges = std::fs::File::create(edge_path)?;
    writeln!(edges, "group,src,dst,weight")?;
    for (g, net) in panel.groups.iter().enumerate() {
        for i in 0..net.n {
            for (j, w) in net.neighbors(i) {
                writeln!(
                    edges,
                    "{},{},{},{}",
                    panel.group_labels[g],
                    panel.node_labels[panel.global_index(g, i)],
                    panel.node_labels[panel.global_index(g, j)],
                    fmt_f64(w)
                )?;
            }
        }
    }

    let mut nodes = std::fs::File::create(node_path)?;
    let mut header = vec!["group".to_string(), "node".to_string()];
    header.extend(panel.x_names.iter().cloned());
    if panel.y.is_some() {
        header.push("y".into());
    }
    header.push("cluster".into());
    writeln!(nodes, "{}", header.join(","))?;
    for (g, net) in panel.groups.iter().enumerate() {
        for i in 0..net.n {
            let global = panel.global_index(g, i);
            let mut fields = vec![
                panel.group_labels[g].clone(),
                panel.node_labels[global].clone(),
            ];
            for j in 0..panel.n_covariates() {
                fields.push(fmt_f64(panel.x[(global, j)]));
            }
            if let Some(ref y) = panel.y {
                fields.push(fmt_f64(y[global]));
            }
            fields.push(panel.cluster_labels[panel.cluster_id[global]].clone());
            writeln!(nodes, "{}", fields.join(","))?;
        }
    }
    Ok(())
}

// ---- Isolate handling --------------------------------------------------

/// Removes isolates from every group, re-normalizing surviving rows.
///
/// Groups that lose all their nodes are removed; a warning string is recorded
/// for each. Dropping a node can in turn isolate nodes that only pointed to
/// it; the returned mask reflects the post-drop state (no further pass).
pub fn drop_isolates(panel: &Panel) -> Result<(Panel, Vec<String>)> {
    let mut warnings = Vec::new();
    let mut groups = Vec::new();
    let mut keep_global: Vec<usize> = Vec::new();
    let mut kept_group_labels = Vec::new();
    for (g, net) in panel.groups.iter().enumerate() {
        let survivors: Vec<usize> = (0..net.n).filter(|&i| !net.isolate_mask[i]).collect();
        if survivors.is_empty() {
            warnings.push(format!(
                "group '{}' contained only isolates and was dropped",
                panel.group_labels[g]
            ));
            continue;
        }
        let m = survivors.len();
        let mut sub = DMatrix::zeros(m, m);
        for (a, &i) in survivors.iter().enumerate() {
            for (b, &j) in survivors.iter().enumerate() {
                sub[(a, b)] = net.weights[(i, j)];
            }
        }
        let sub_net = Network::new(groups.len(), sub)?;
        groups.push(sub_net);
        kept_group_labels.push(panel.group_labels[g].clone());
        keep_global.extend(survivors.iter().map(|&i| panel.global_index(g, i)));
    }

    let p = panel.n_covariates();
    let total = keep_global.len();
    let mut x = DMatrix::zeros(total, p);
    for (row, &old) in keep_global.iter().enumerate() {
        for j in 0..p {
            x[(row, j)] = panel.x[(old, j)];
        }
    }
    let y = panel.y.as_ref().map(|yv| {
        DVector::from_iterator(total, keep_global.iter().map(|&old| yv[old]))
    });
    let cluster_id: Vec<usize> = keep_global.iter().map(|&old| panel.cluster_id[old]).collect();
    let node_labels: Vec<String> = keep_global
        .iter()
        .map(|&old| panel.node_labels[old].clone())
        .collect();

    let mut offsets = Vec::with_capacity(groups.len());
    let mut acc = 0usize;
    for net in &groups {
        offsets.push(acc);
        acc += net.n;
    }

    Ok((
        Panel {
            groups,
            offsets,
            x,
            x_names: panel.x_names.clone(),
            y,
            cluster_id,
            group_labels: kept_group_labels,
            node_labels,
            cluster_labels: panel.cluster_labels.clone(),
        },
        warnings,
    ))
}
