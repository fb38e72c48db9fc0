//! Graphical verifier for the identification theorems. Enumerates every
//! causal structure over the observed nodes Y, D, M, X (with edges drawn
//! from a fixed temporal whitelist) and the six pairwise latent
//! confounders, evaluates each assumption as a d-separation statement,
//! and checks that the claimed implications hold in all 4096 graphs.

use crate::error::{Error, Result};

pub const Y: usize = 0;
pub const D: usize = 1;
pub const M: usize = 2;
pub const X: usize = 3;
/// Latent confounder nodes, one per unordered pair of observed nodes.
pub const U_DY: usize = 4;
pub const U_DM: usize = 5;
pub const U_DX: usize = 6;
pub const U_MY: usize = 7;
pub const U_MX: usize = 8;
pub const U_XY: usize = 9;
pub const N_NODES: usize = 10;

pub const NODE_NAMES: [&str; N_NODES] = [
    "Y", "D", "M", "X", "U_DY", "U_DM", "U_DX", "U_MY", "U_MX", "U_XY",
];

/// Observed directed edges compatible with the temporal order
/// X before D before M before Y.
pub const OBSERVED_EDGES: [(usize, usize); 6] =
    [(X, D), (X, M), (X, Y), (D, M), (D, Y), (M, Y)];

/// Each latent points at its two observed children.
pub const LATENT_CHILDREN: [(usize, (usize, usize)); 6] = [
    (U_DY, (D, Y)),
    (U_DM, (D, M)),
    (U_DX, (D, X)),
    (U_MY, (M, Y)),
    (U_MX, (M, X)),
    (U_XY, (X, Y)),
];

/// A directed acyclic graph over the ten nodes, stored as an adjacency
/// matrix `edge[from][to]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dag {
    pub edge: [[bool; N_NODES]; N_NODES],
}

impl Dag {
    pub fn empty() -> Self {
        Dag {
            edge: [[false; N_NODES]; N_NODES],
        }
    }

    /// Build a graph from bitmasks over the observed-edge whitelist and
    /// the latent-confounder list.
    pub fn from_masks(observed_mask: u8, latent_mask: u8) -> Self {
        let mut g = Dag::empty();
        for (bit, &(a, b)) in OBSERVED_EDGES.iter().enumerate() {
            if observed_mask >> bit & 1 == 1 {
                g.edge[a][b] = true;
            }
        }
        for (bit, &(u, (a, b))) in LATENT_CHILDREN.iter().enumerate() {
            if latent_mask >> bit & 1 == 1 {
                g.edge[u][a] = true;
                g.edge[u][b] = true;
            }
        }
        g
    }

    pub fn parents(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        (0..N_NODES).filter(move |&u| self.edge[u][v])
    }

    /// Nodes from which `targets` are reachable, including the targets.
    pub fn ancestors(&self, targets: &[usize]) -> [bool; N_NODES] {
        let mut anc = [false; N_NODES];
        let mut stack: Vec<usize> = targets.to_vec();
        for &t in targets {
            anc[t] = true;
        }
        while let Some(v) = stack.pop() {
            for u in 0..N_NODES {
                if self.edge[u][v] && !anc[u] {
                    anc[u] = true;
                    stack.push(u);
                }
            }
        }
        anc
    }

    /// Interventional graph: all edges starting from the given nodes
    /// removed (G_D removes the out-edges of D, G_DM those of D and M).
    pub fn intervene(&self, remove_outgoing_of: &[usize]) -> Dag {
        let mut g = self.clone();
        for &t in remove_outgoing_of {
            for w in 0..N_NODES {
                g.edge[t][w] = false;
            }
        }
        g
    }

    /// Is there a directed path from `from` to `to` that avoids every
    /// node in `avoid`?
    pub fn has_directed_path_avoiding(&self, from: usize, to: usize, avoid: &[usize]) -> bool {
        let mut seen = [false; N_NODES];
        let mut stack = vec![from];
        seen[from] = true;
        while let Some(v) = stack.pop() {
            for w in 0..N_NODES {
                if self.edge[v][w] && !seen[w] && !avoid.contains(&w) {
                    if w == to {
                        return true;
                    }
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        false
    }

    /// d-separation of `a` and `b` given `cond`, via the ancestral-graph
    /// moralization criterion: restrict to ancestors of {a, b} ∪ cond,
    /// moralize (marry co-parents, drop directions), delete cond, and
    /// test undirected reachability.
    pub fn d_separated(&self, a: usize, b: usize, cond: &[usize]) -> bool {
        let mut targets = vec![a, b];
        targets.extend_from_slice(cond);
        let anc = self.ancestors(&targets);

        let mut undirected = [[false; N_NODES]; N_NODES];
        for v in 0..N_NODES {
            if !anc[v] {
                continue;
            }
            let pa: Vec<usize> = self.parents(v).collect();
            for &p in &pa {
                undirected[p][v] = true;
                undirected[v][p] = true;
            }
            for i in 0..pa.len() {
                for j in i + 1..pa.len() {
                    undirected[pa[i]][pa[j]] = true;
                    undirected[pa[j]][pa[i]] = true;
                }
            }
        }

        let mut blocked = [false; N_NODES];
        for &c in cond {
            blocked[c] = true;
        }
        let mut seen = [false; N_NODES];
        let mut stack = vec![a];
        seen[a] = true;
        while let Some(v) = stack.pop() {
            for w in 0..N_NODES {
                if undirected[v][w] && anc[w] && !seen[w] && !blocked[w] {
                    if w == b {
                        return false;
                    }
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        true
    }
}

/// One edge per line in `tail -> head` form, observed edges first.
pub fn edge_list(g: &Dag) -> String {
    let mut lines = Vec::new();
    for a in 0..N_NODES {
        for b in 0..N_NODES {
            if g.edge[a][b] {
                lines.push(format!("{} -> {}", NODE_NAMES[a], NODE_NAMES[b]));
            }
        }
    }
    if lines.is_empty() {
        "(no edges)".to_string()
    } else {
        lines.join("\n")
    }
}

/// Truth values of the identifying assumptions in one graph, each read
/// as a structural property or d-separation statement conditioning on X
/// in the relevant interventional graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct AssumptionProfile {
    /// Temporal-order restriction on observed edges; true by
    /// construction because enumeration uses the whitelist.
    pub a1_structure: bool,
    /// The treatment affects the mediator (edge D -> M present).
    pub a3_first_stage: bool,
    /// Y d-separated from D given X in G_DM (out-edges of D and M cut).
    pub a4a: bool,
    /// M d-separated from D given X in G_D (out-edges of D cut).
    pub a4b: bool,
    /// No directed path from D to Y that bypasses M.
    pub a5_full_mediation: bool,
    /// Y d-separated from M given X in G_DM.
    pub a6_mediator_exogeneity: bool,
}

pub fn assumption_profile(g: &Dag) -> AssumptionProfile {
    let g_d = g.intervene(&[D]);
    let g_dm = g.intervene(&[D, M]);
    AssumptionProfile {
        a1_structure: true,
        a3_first_stage: g.edge[D][M],
        a4a: g_dm.d_separated(Y, D, &[X]),
        a4b: g_d.d_separated(M, D, &[X]),
        a5_full_mediation: !g.has_directed_path_avoiding(D, Y, &[M]),
        a6_mediator_exogeneity: g_dm.d_separated(Y, M, &[X]),
    }
}

/// The testable implication: Y d-separated from D given the mediator and
/// the covariates.
pub fn ti_holds(g: &Dag) -> bool {
    g.d_separated(Y, D, &[M, X])
}

/// All 4096 graphs: every subset of the observed whitelist crossed with
/// every subset of the six latent confounders.
pub fn enumerate_dags() -> Vec<Dag> {
    let mut out = Vec::with_capacity(64 * 64);
    for obs in 0u8..64 {
        for lat in 0u8..64 {
            out.push(Dag::from_masks(obs, lat));
        }
    }
    out
}

/// Which assumptions a theorem takes as premises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Premises {
    pub a3: bool,
    pub a4a: bool,
    pub a4b: bool,
}

impl Premises {
    pub fn satisfied_by(&self, p: &AssumptionProfile) -> bool {
        (!self.a3 || p.a3_first_stage) && (!self.a4a || p.a4a) && (!self.a4b || p.a4b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Claim {
    /// Under the premises, (a5 and a6) holds iff the testable
    /// implication holds.
    Theorem1,
    /// Under the premises, (a4a and a5 and a6) holds iff the testable
    /// implication holds.
    Theorem2,
}

impl Claim {
    pub fn premises(&self) -> Premises {
        match self {
            Claim::Theorem1 => Premises {
                a3: true,
                a4a: true,
                a4b: true,
            },
            Claim::Theorem2 => Premises {
                a3: true,
                a4a: false,
                a4b: false,
            },
        }
    }

    pub fn lhs(&self, p: &AssumptionProfile) -> bool {
        match self {
            Claim::Theorem1 => p.a5_full_mediation && p.a6_mediator_exogeneity,
            Claim::Theorem2 => {
                p.a4a && p.a5_full_mediation && p.a6_mediator_exogeneity
            }
        }
    }
}

/// One graph on which a claimed equivalence fails.
#[derive(Debug, Clone, serde::Serialize)]
pub struct Counterexample {
    pub observed_mask: u8,
    pub latent_mask: u8,
    pub profile: AssumptionProfile,
    pub ti: bool,
    /// true if the left-hand side held but the implication failed.
    pub forward_failure: bool,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct VerifyReport {
    pub graphs_checked: usize,
    pub premises_met: usize,
    pub counterexamples: Vec<Counterexample>,
}

fn verify_equivalence<L, R>(lhs: L, rhs: R, premises: Premises) -> VerifyReport
where
    L: Fn(&AssumptionProfile, &Dag) -> bool,
    R: Fn(&AssumptionProfile, &Dag) -> bool,
{
    let mut report = VerifyReport {
        graphs_checked: 0,
        premises_met: 0,
        counterexamples: Vec::new(),
    };
    for obs in 0u8..64 {
        for lat in 0u8..64 {
            let g = Dag::from_masks(obs, lat);
            report.graphs_checked += 1;
            let profile = assumption_profile(&g);
            if !premises.satisfied_by(&profile) {
                continue;
            }
            report.premises_met += 1;
            let l = lhs(&profile, &g);
            let r = rhs(&profile, &g);
            if l != r {
                report.counterexamples.push(Counterexample {
                    observed_mask: obs,
                    latent_mask: lat,
                    profile,
                    ti: ti_holds(&g),
                    forward_failure: l,
                });
            }
        }
    }
    report
}

/// Check one theorem over all 4096 graphs.
pub fn verify_theorem(claim: Claim) -> VerifyReport {
    verify_equivalence(
        |p, _| claim.lhs(p),
        |_, g| ti_holds(g),
        claim.premises(),
    )
}

/// Deliberately wrong claim used as a detector sanity check: a5 alone is
/// not equivalent to the testable implication. Must return at least one
/// counterexample.
pub fn verify_sanity_negative() -> VerifyReport {
    verify_equivalence(
        |p, _| p.a5_full_mediation,
        |_, g| ti_holds(g),
        Premises {
            a3: true,
            a4a: false,
            a4b: false,
        },
    )
}

/// Run the requested theorem checks, failing on any counterexample and
/// on a sanity negative that produces none.
pub fn verify_all(theorem: Option<Claim>) -> Result<Vec<(String, VerifyReport)>> {
    let claims: Vec<Claim> = match theorem {
        Some(c) => vec![c],
        None => vec![Claim::Theorem1, Claim::Theorem2],
    };
    let mut out = Vec::new();
    for c in claims {
        let name = match c {
            Claim::Theorem1 => "theorem-1",
            Claim::Theorem2 => "theorem-2",
        };
        out.push((name.to_string(), verify_theorem(c)));
    }
    let sanity = verify_sanity_negative();
    if sanity.counterexamples.is_empty() {
        return Err(Error::Internal(
            "sanity negative produced no counterexample; the detector is broken".into(),
        ));
    }
    out.push(("sanity-negative".to_string(), sanity));
    Ok(out)
}
