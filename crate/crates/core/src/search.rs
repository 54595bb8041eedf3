//! Width fitting under a compute budget, grid evaluation and cross-class
//! rank selection.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::builder::{build_itnet, BuildError, HyperParams};
use crate::cost::{macs_per_output, CostReport};
use crate::graph::CompGraph;
use crate::train::{auc_of, CurvePoint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SearchError {
    #[error("budget {budget} MACs is not above the {minimum} MACs of the narrowest network")]
    Infeasible { budget: u64, minimum: u64 },
    #[error("no usable cells in the {0} class")]
    EmptyClass(&'static str),
    #[error("bad grid spec {spec:?}: {reason}")]
    Grid { spec: String, reason: String },
    #[error(transparent)]
    Build(#[from] BuildError),
}

fn last_macs(hp: &HyperParams) -> Result<u64, SearchError> {
    let g = build_itnet(hp)?;
    Ok(*macs_per_output(&g).last().expect("N ≥ 1"))
}

/// Largest even `f` whose last-output MACs stay below `budget`: the result
/// satisfies `macs(f) < budget ≤ macs(f + 2)`.
pub fn fit_width(base: &HyperParams, budget: u64) -> Result<usize, SearchError> {
    let at = |f: usize| last_macs(&base.with_f(f));
    let minimum = at(2)?;
    if minimum >= budget {
        return Err(SearchError::Infeasible { budget, minimum });
    }
    // invariant: macs(2·lo) < budget ≤ macs(2·hi)
    let mut lo = 1usize;
    let mut hi = 2usize;
    while at(2 * hi)? < budget {
        lo = hi;
        hi *= 2;
    }
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if at(2 * mid)? < budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(2 * lo)
}

/// Cartesian grid over `(L, N, K)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub l: Vec<usize>,
    pub n: Vec<usize>,
    pub k: Vec<usize>,
}

impl GridSpec {
    /// Parses `"L=1,2;N=2,4;K=0,1"`; every key must appear exactly once.
    pub fn parse(spec: &str) -> Result<Self, SearchError> {
        let err = |reason: &str| SearchError::Grid {
            spec: spec.to_string(),
            reason: reason.to_string(),
        };
        let mut found: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, values) = part.split_once('=').ok_or_else(|| err("expected KEY=v1,v2"))?;
            let key = key.trim().to_ascii_uppercase();
            if !["L", "N", "K"].contains(&key.as_str()) {
                return Err(err(&format!("unknown key {key}")));
            }
            let values = values
                .split(',')
                .map(|v| v.trim().parse::<usize>().map_err(|_| err(&format!("bad value {v:?}"))))
                .collect::<Result<Vec<_>, _>>()?;
            if found.insert(key.clone(), values).is_some() {
                return Err(err(&format!("duplicate key {key}")));
            }
        }
        let mut take = |k: &str| found.remove(k).ok_or_else(|| err(&format!("missing key {k}")));
        Ok(Self {
            l: take("L")?,
            n: take("N")?,
            k: take("K")?,
        })
    }

    /// `(L, N, K)` triples, `L` varying slowest.
    pub fn cells(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for &l in &self.l {
            for &n in &self.n {
                for &k in &self.k {
                    out.push((l, n, k));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub l: usize,
    pub n: usize,
    pub k: usize,
    pub f: Option<usize>,
    pub shared: bool,
    pub cost: Option<CostReport>,
    pub curve: Vec<CurvePoint>,
    pub auc: Option<f64>,
    pub peak_miou: Option<f64>,
    /// Why the cell could not be evaluated.
    pub error: Option<String>,
}

impl GridCell {
    fn key(&self) -> (usize, usize, usize) {
        (self.l, self.n, self.k)
    }

    fn usable(&self) -> Option<(f64, f64)> {
        match (self.error.as_ref(), self.auc, self.peak_miou) {
            (None, Some(a), Some(p)) => Some((a, p)),
            _ => None,
        }
    }

    fn last_macs(&self) -> u64 {
        self.cost.as_ref().map_or(u64::MAX, |c| c.last().macs)
    }
}

/// Fits, evaluates and scores every cell of `grid`. `eval` returns the mIoU
/// of each output; failures are recorded in the cell. Cells run in
/// parallel and come back in grid order.
pub fn grid_search<E>(grid: &GridSpec, base: &HyperParams, shared: bool, budget: u64, y0: f64, eval: E) -> Vec<GridCell>
where
    E: Fn(&HyperParams, &CompGraph) -> Result<Vec<f64>, String> + Sync,
{
    grid.cells()
        .par_iter()
        .map(|&(l, n, k)| {
            let mut cell = GridCell {
                l,
                n,
                k,
                f: None,
                shared,
                cost: None,
                curve: Vec::new(),
                auc: None,
                peak_miou: None,
                error: None,
            };
            let hp = HyperParams {
                l,
                n,
                k,
                shared,
                ..base.clone()
            };
            if let Err(e) = score_cell(&mut cell, &hp, budget, y0, &eval) {
                cell.error = Some(e);
            }
            cell
        })
        .collect()
}

fn score_cell<E>(cell: &mut GridCell, hp: &HyperParams, budget: u64, y0: f64, eval: &E) -> Result<(), String>
where
    E: Fn(&HyperParams, &CompGraph) -> Result<Vec<f64>, String>,
{
    let f = fit_width(hp, budget).map_err(|e| e.to_string())?;
    cell.f = Some(f);
    let hp = hp.with_f(f);
    let g = build_itnet(&hp).map_err(|e| e.to_string())?;
    let cost = CostReport::compute(&g).map_err(|e| e.to_string())?;
    let miou = eval(&hp, &g)?;
    if miou.len() != cost.outputs.len() {
        return Err(format!(
            "evaluation returned {} values for {} outputs",
            miou.len(),
            cost.outputs.len()
        ));
    }
    cell.curve = cost
        .outputs
        .iter()
        .zip(&miou)
        .map(|(o, &y)| CurvePoint { x: o.macs as f64, y })
        .collect();
    cell.auc = Some(auc_of(&cell.curve, y0).map_err(|e| e.to_string())?);
    cell.peak_miou = miou.iter().copied().reduce(f64::max);
    cell.cost = Some(cost);
    Ok(())
}

/// Outcome of [`rank_and_select`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub l: usize,
    pub n: usize,
    pub k: usize,
    /// `(L, N, K, rank shared, rank independent, mean)` for every candidate.
    pub table: Vec<RankRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub l: usize,
    pub n: usize,
    pub k: usize,
    pub rank_shared: usize,
    pub rank_independent: usize,
    pub mean_rank: f64,
}

/// Ranks by AUC (1 = best, equal AUCs share the better rank) among cells
/// whose peak mIoU is above the class best minus `gap`. Dropped and failed
/// cells are absent.
fn class_ranks(
    cells: &[GridCell],
    gap: f64,
    class: &'static str,
) -> Result<BTreeMap<(usize, usize, usize), usize>, SearchError> {
    let usable: Vec<(&GridCell, f64, f64)> = cells
        .iter()
        .filter_map(|c| c.usable().map(|(a, p)| (c, a, p)))
        .collect();
    let best = usable
        .iter()
        .map(|u| u.2)
        .reduce(f64::max)
        .ok_or(SearchError::EmptyClass(class))?;
    let survivors: Vec<_> = usable.into_iter().filter(|u| u.2 > best - gap).collect();
    let mut ranks = BTreeMap::new();
    for s in &survivors {
        let better = survivors.iter().filter(|o| o.1 > s.1).count();
        ranks.insert(s.0.key(), better + 1);
    }
    Ok(ranks)
}

/// Picks the `(L, N, K)` with the lowest mean of its shared and independent
/// AUC ranks. A candidate missing from one class gets that class's worst
/// rank plus one. Ties go to smaller last-output MACs, then smaller `N`.
pub fn rank_and_select(shared: &[GridCell], independent: &[GridCell], gap: f64) -> Result<Selection, SearchError> {
    let rs = class_ranks(shared, gap, "shared")?;
    let ri = class_ranks(independent, gap, "independent")?;
    let worst = |r: &BTreeMap<_, usize>| r.values().copied().max().unwrap_or(0) + 1;
    let (ws, wi) = (worst(&rs), worst(&ri));
    let mut macs: BTreeMap<(usize, usize, usize), u64> = BTreeMap::new();
    for c in shared.iter().chain(independent) {
        let e = macs.entry(c.key()).or_insert(u64::MAX);
        *e = (*e).min(c.last_macs());
    }
    let mut table: Vec<RankRow> = rs
        .keys()
        .chain(ri.keys())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .map(|&(l, n, k)| {
            let a = rs.get(&(l, n, k)).copied().unwrap_or(ws);
            let b = ri.get(&(l, n, k)).copied().unwrap_or(wi);
            RankRow {
                l,
                n,
                k,
                rank_shared: a,
                rank_independent: b,
                mean_rank: (a + b) as f64 / 2.0,
            }
        })
        .collect();
    table.sort_by(|x, y| {
        x.mean_rank
            .partial_cmp(&y.mean_rank)
            .unwrap_or(Ordering::Equal)
            .then(macs[&(x.l, x.n, x.k)].cmp(&macs[&(y.l, y.n, y.k)]))
            .then(x.n.cmp(&y.n))
            .then((x.l, x.k).cmp(&(y.l, y.k)))
    });
    let best = &table[0];
    Ok(Selection {
        l: best.l,
        n: best.n,
        k: best.k,
        table,
    })
}
