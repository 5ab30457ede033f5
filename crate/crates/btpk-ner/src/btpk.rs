//! Binary announcement trees over a tagged sequence: a trunk of states
//! read off the forward-only predictions, one primed branch holding the
//! full bidirectional reading, and a ρ edge tying the branch to the
//! earliest announcement that licenses it.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::announce::Announcement;
use crate::brnn::{BrnnError, BrnnModel, Mask, Side};
use crate::corpus::split_tag;

#[derive(Debug, Error)]
pub enum BtpkError {
    #[error("duplicate state id `{0}`")]
    DuplicateStateId(String),
    #[error("edge references unknown state `{0}`")]
    UnknownStateInEdge(String),
    #[error("no root state (an unprimed state at height 0)")]
    NoRoot,
    #[error(
        "supporting announcement at height {announcement} does not lie after \
         branch height {branch}"
    )]
    AnnouncementNotAfterBranch { announcement: usize, branch: usize },
    #[error(transparent)]
    Brnn(#[from] BrnnError),
}

/// One epistemic state: a sequence position (height) on either the trunk
/// or the primed branch, labeled with the atoms true there.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BtpkState {
    pub id: String,
    #[serde(rename = "h")]
    pub height: usize,
    pub primed: bool,
    pub atoms: BTreeSet<String>,
}

/// The tree: states plus the successor relation `r1` and the announcement
/// relation `rho`, with the announcements kept as provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BtpkRepr", into = "BtpkRepr")]
pub struct BtpkModel {
    states: Vec<BtpkState>,
    index: HashMap<String, usize>,
    root: usize,
    r1: Vec<(String, String)>,
    rho: Vec<(String, String)>,
    height: usize,
    announcements: Vec<Announcement>,
    run: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct BtpkRepr {
    height: usize,
    states: Vec<BtpkState>,
    r1: Vec<(String, String)>,
    rho: Vec<(String, String)>,
    announcements: Vec<Announcement>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    run: Option<serde_json::Value>,
}

impl TryFrom<BtpkRepr> for BtpkModel {
    type Error = BtpkError;

    fn try_from(r: BtpkRepr) -> Result<Self, BtpkError> {
        BtpkModel::from_parts(r.states, r.r1, r.rho, r.height, r.announcements, r.run)
    }
}

impl From<BtpkModel> for BtpkRepr {
    fn from(m: BtpkModel) -> Self {
        Self {
            height: m.height,
            states: m.states,
            r1: m.r1,
            rho: m.rho,
            announcements: m.announcements,
            run: m.run,
        }
    }
}

/// Trunk state id at a height.
pub fn trunk_id(height: usize) -> String {
    format!("s{height}")
}

/// Primed (branch) state id at a height.
pub fn primed_id(height: usize) -> String {
    format!("s'{height}")
}

/// The atoms a predicted tag contributes: `label(<coarse>)`, plus `begin`
/// for `B_` tags.
pub fn atom_set(tag: &str) -> BTreeSet<String> {
    let mut atoms = BTreeSet::new();
    match split_tag(tag) {
        Some((kind, ty)) => {
            atoms.insert(format!("label({ty})"));
            if kind == 'B' {
                atoms.insert("begin".to_string());
            }
        }
        None => {
            atoms.insert(format!("label({tag})"));
        }
    }
    atoms
}

impl BtpkModel {
    /// Assembles a model from raw parts, checking only representability:
    /// ids unique, edges between known states, a root present. Semantic
    /// invariants are [`validate_btpk`]'s job.
    pub fn from_parts(
        states: Vec<BtpkState>,
        r1: Vec<(String, String)>,
        rho: Vec<(String, String)>,
        height: usize,
        announcements: Vec<Announcement>,
        run: Option<serde_json::Value>,
    ) -> Result<Self, BtpkError> {
        let mut index = HashMap::new();
        for (i, s) in states.iter().enumerate() {
            if index.insert(s.id.clone(), i).is_some() {
                return Err(BtpkError::DuplicateStateId(s.id.clone()));
            }
        }
        for (u, v) in r1.iter().chain(rho.iter()) {
            for id in [u, v] {
                if !index.contains_key(id) {
                    return Err(BtpkError::UnknownStateInEdge(id.clone()));
                }
            }
        }
        let root = states
            .iter()
            .position(|s| s.height == 0 && !s.primed)
            .ok_or(BtpkError::NoRoot)?;
        Ok(Self { states, index, root, r1, rho, height, announcements, run })
    }

    pub fn states(&self) -> &[BtpkState] {
        &self.states
    }

    pub fn state(&self, id: &str) -> Option<&BtpkState> {
        self.index.get(id).map(|&i| &self.states[i])
    }

    pub fn root_id(&self) -> &str {
        &self.states[self.root].id
    }

    pub fn r1_edges(&self) -> &[(String, String)] {
        &self.r1
    }

    pub fn rho_edges(&self) -> &[(String, String)] {
        &self.rho
    }

    /// Number of distinct heights `|H|` (sequence length + 1 when built).
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn announcements(&self) -> &[Announcement] {
        &self.announcements
    }

    pub fn run_info(&self) -> Option<&serde_json::Value> {
        self.run.as_ref()
    }

    pub fn set_run_info(&mut self, run: serde_json::Value) {
        self.run = Some(run);
    }

    /// Ids of the states where `atom` holds.
    pub fn pi(&self, atom: &str) -> BTreeSet<&str> {
        self.states
            .iter()
            .filter(|s| s.atoms.contains(atom))
            .map(|s| s.id.as_str())
            .collect()
    }

    /// Root-to-leaf walk preferring the primed state at each height — the
    /// reading corrected by the announcement.
    pub fn corrected_path(&self) -> Vec<&BtpkState> {
        self.path_by_height(true)
    }

    /// Root-to-leaf walk over unprimed states only — the uncorrected,
    /// forward-only reading.
    pub fn trunk_path(&self) -> Vec<&BtpkState> {
        self.path_by_height(false)
    }

    fn path_by_height(&self, prefer_primed: bool) -> Vec<&BtpkState> {
        let mut path = Vec::new();
        for h in 0..self.height {
            let primed = self.states.iter().find(|s| s.height == h && s.primed);
            let trunk = self.states.iter().find(|s| s.height == h && !s.primed);
            let pick = if prefer_primed { primed.or(trunk) } else { trunk };
            if let Some(s) = pick {
                path.push(s);
            }
        }
        path
    }
}

/// Positions where the forward-only prediction disagrees with the full
/// bidirectional one, in ascending order.
pub fn find_branch_points(model: &BrnnModel, token_ids: &[usize]) -> Result<Vec<usize>, BtpkError> {
    let n = token_ids.len();
    let full = model.forward(token_ids, &Mask::new())?;
    let fwd_only = model.forward(token_ids, &Mask::span(0, n - 1, Side::Backward))?;
    Ok((0..n)
        .filter(|&i| full.predictions[i] != fwd_only.predictions[i])
        .collect())
}

/// Builds the tree for one sequence. The trunk carries forward-only
/// predictions; the earliest branch point covered by an announcement whose
/// gram starts after it gets a primed branch carrying the full
/// predictions, with a same-height ρ edge at the announcement's height.
/// Branch points without such support stay unbranched.
pub fn build_btpk(
    model: &BrnnModel,
    token_ids: &[usize],
    announcements: &[Announcement],
    branch_points: &[usize],
) -> Result<BtpkModel, BtpkError> {
    let n = token_ids.len();
    let full = model.forward(token_ids, &Mask::new())?;
    let fwd_only = model.forward(token_ids, &Mask::span(0, n - 1, Side::Backward))?;

    let mut states = vec![BtpkState {
        id: trunk_id(0),
        height: 0,
        primed: false,
        atoms: BTreeSet::from(["start".to_string()]),
    }];
    for h in 1..=n {
        states.push(BtpkState {
            id: trunk_id(h),
            height: h,
            primed: false,
            atoms: atom_set(model.tagset.tag(fwd_only.predictions[h - 1])),
        });
    }
    let mut r1: Vec<(String, String)> =
        (0..n).map(|h| (trunk_id(h), trunk_id(h + 1))).collect();
    let mut rho = Vec::new();

    let mut points = branch_points.to_vec();
    points.sort_unstable();
    points.dedup();
    let mut chosen = None;
    for &pos in &points {
        let support = announcements
            .iter()
            .filter(|a| a.target.covers(pos) && a.gram.start > pos)
            .min_by_key(|a| (a.gram.start, a.gram.end, a.side));
        if let Some(a) = support {
            chosen = Some((pos + 1, a));
            break;
        }
    }
    if let Some((p, ann)) = chosen {
        let a = ann.gram.start + 1;
        if a <= p {
            return Err(BtpkError::AnnouncementNotAfterBranch { announcement: a, branch: p });
        }
        for h in p..=n {
            states.push(BtpkState {
                id: primed_id(h),
                height: h,
                primed: true,
                atoms: atom_set(model.tagset.tag(full.predictions[h - 1])),
            });
        }
        r1.push((trunk_id(p - 1), primed_id(p)));
        for h in p..n {
            r1.push((primed_id(h), primed_id(h + 1)));
        }
        rho.push((trunk_id(a), primed_id(a)));
    }

    states.sort_by_key(|s| (s.height, s.primed));
    BtpkModel::from_parts(states, r1, rho, n + 1, announcements.to_vec(), None)
}

/// Transitive closure of the `r1` relation as ordered id pairs.
pub fn transitive_closure(btpk: &BtpkModel) -> BTreeSet<(String, String)> {
    let ids: Vec<&str> = btpk.states().iter().map(|s| s.id.as_str()).collect();
    let idx: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let n = ids.len();
    let mut reach = vec![vec![false; n]; n];
    for (u, v) in btpk.r1_edges() {
        reach[idx[u.as_str()]][idx[v.as_str()]] = true;
    }
    for k in 0..n {
        for i in 0..n {
            if reach[i][k] {
                for j in 0..n {
                    if reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }
    let mut closure = BTreeSet::new();
    for i in 0..n {
        for j in 0..n {
            if reach[i][j] {
                closure.insert((ids[i].to_string(), ids[j].to_string()));
            }
        }
    }
    closure
}

/// Checks every structural invariant and returns all violations found
/// (empty = valid): single root, `r1` raises height by exactly one and
/// forms a tree with at most two children per state, heights are
/// contiguous and match the stored height count, ρ crosses trunk→primed
/// at equal height, and the edge count stays within
/// `n ≤ |E| < |V|·(|V|−1)` for `|V| = 2n`.
pub fn validate_btpk(btpk: &BtpkModel) -> Vec<String> {
    let mut violations = Vec::new();
    let states = btpk.states();
    let idx: BTreeMap<&str, usize> =
        states.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();

    let roots: Vec<&BtpkState> =
        states.iter().filter(|s| s.height == 0 && !s.primed).collect();
    if roots.len() != 1 {
        violations.push(format!("expected exactly one root, found {}", roots.len()));
    }
    for s in states.iter().filter(|s| s.height == 0 && s.primed) {
        violations.push(format!("primed state `{}` at height 0", s.id));
    }

    let mut in_degree = vec![0usize; states.len()];
    let mut children = vec![0usize; states.len()];
    for (u, v) in btpk.r1_edges() {
        let (ui, vi) = (idx[u.as_str()], idx[v.as_str()]);
        in_degree[vi] += 1;
        children[ui] += 1;
        if states[vi].height != states[ui].height + 1 {
            violations.push(format!(
                "r1 edge `{u}`->`{v}` jumps height {} to {}",
                states[ui].height, states[vi].height
            ));
        }
    }
    for (i, s) in states.iter().enumerate() {
        if s.id == btpk.root_id() {
            if in_degree[i] != 0 {
                violations.push(format!("root `{}` has an r1 parent", s.id));
            }
        } else if in_degree[i] == 0 {
            violations.push(format!("state `{}` is unreachable (no r1 parent)", s.id));
        } else if in_degree[i] > 1 {
            violations.push(format!("state `{}` has {} r1 parents", s.id, in_degree[i]));
        }
        if children[i] > 2 {
            violations.push(format!("state `{}` has {} r1 children", s.id, children[i]));
        }
    }

    // cycle check: repeatedly strip sources; leftovers with edges are cyclic
    {
        let mut degree = in_degree.clone();
        let mut queue: Vec<usize> =
            (0..states.len()).filter(|&i| degree[i] == 0).collect();
        let mut seen = 0;
        while let Some(i) = queue.pop() {
            seen += 1;
            for (u, v) in btpk.r1_edges() {
                if idx[u.as_str()] == i {
                    let vi = idx[v.as_str()];
                    degree[vi] -= 1;
                    if degree[vi] == 0 {
                        queue.push(vi);
                    }
                }
            }
        }
        if seen != states.len() {
            violations.push("r1 contains a cycle".to_string());
        }
    }

    let heights: BTreeSet<usize> = states.iter().map(|s| s.height).collect();
    if btpk.height() < 2 {
        violations.push(format!("height count {} is below 2", btpk.height()));
    }
    for h in 0..btpk.height() {
        if !heights.contains(&h) {
            violations.push(format!("no state at height {h}"));
        }
    }
    for s in states.iter().filter(|s| s.height >= btpk.height()) {
        violations.push(format!(
            "state `{}` at height {} exceeds height count {}",
            s.id,
            s.height,
            btpk.height()
        ));
    }

    for (u, v) in btpk.rho_edges() {
        let (su, sv) = (&states[idx[u.as_str()]], &states[idx[v.as_str()]]);
        if su.height != sv.height {
            violations.push(format!(
                "rho edge `{u}`->`{v}` crosses heights {} and {}",
                su.height, sv.height
            ));
        }
        if su.primed || !sv.primed {
            violations.push(format!("rho edge `{u}`->`{v}` must go unprimed -> primed"));
        }
    }

    if btpk.height() >= 2 {
        let n = btpk.height() - 1;
        let v = 2 * n;
        let e = btpk.r1_edges().len() + btpk.rho_edges().len();
        if e < n || e >= v * (v - 1) {
            violations.push(format!(
                "edge count {e} outside [{n}, {}) for {v} possible states",
                v * (v - 1)
            ));
        }
    }
    violations
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::announce::{extract_announcements, EntitySpan, GramSpan};
    use crate::testutil;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn state(id: &str, height: usize, primed: bool) -> BtpkState {
        BtpkState { id: id.to_string(), height, primed, atoms: BTreeSet::new() }
    }

    fn edges(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(u, v)| (u.to_string(), v.to_string())).collect()
    }

    #[test]
    fn context_free_sequence_builds_a_plain_chain() {
        let m = testutil::context_free_model();
        let ids = m.vocab.encode(&testutil::context_free_sequence().tokens);
        let points = find_branch_points(&m, &ids).unwrap();
        assert!(points.is_empty());
        let tree = build_btpk(&m, &ids, &[], &points).unwrap();
        assert_eq!(tree.height(), 4);
        let got: Vec<(&str, usize, bool)> =
            tree.states().iter().map(|s| (s.id.as_str(), s.height, s.primed)).collect();
        assert_eq!(
            got,
            vec![("s0", 0, false), ("s1", 1, false), ("s2", 2, false), ("s3", 3, false)]
        );
        assert_eq!(tree.r1_edges(), &edges(&[("s0", "s1"), ("s1", "s2"), ("s2", "s3")]));
        assert!(tree.rho_edges().is_empty());
        assert_eq!(tree.state("s0").unwrap().atoms, BTreeSet::from(["start".to_string()]));
        assert_eq!(
            tree.state("s2").unwrap().atoms,
            BTreeSet::from(["begin".to_string(), "label(video)".to_string()])
        );
        assert_eq!(tree.state("s3").unwrap().atoms, BTreeSet::from(["label(O)".to_string()]));
        assert!(validate_btpk(&tree).is_empty());
    }

    #[test]
    fn and_gate_sequence_builds_one_primed_branch() {
        let m = testutil::and_gate_model();
        let ids = m.vocab.encode(&testutil::and_gate_sequence().tokens);
        let points = find_branch_points(&m, &ids).unwrap();
        assert_eq!(points, vec![1]);
        let target = EntitySpan::new(1, 1, "video");
        let anns = extract_announcements(&m, &ids, &target, 1).unwrap();
        let tree = build_btpk(&m, &ids, &anns, &points).unwrap();

        assert_eq!(tree.height(), 7);
        assert_eq!(tree.states().len(), 12);
        let primed: Vec<&str> = tree
            .states()
            .iter()
            .filter(|s| s.primed)
            .map(|s| s.id.as_str())
            .collect();
        assert_eq!(primed, vec!["s'2", "s'3", "s'4", "s'5", "s'6"]);
        assert_eq!(tree.r1_edges().len(), 11);
        assert!(tree.r1_edges().contains(&("s1".to_string(), "s'2".to_string())));
        // the earliest supporting gram starts at position 2, so ρ sits at height 3
        assert_eq!(tree.rho_edges(), &edges(&[("s3", "s'3")]));

        // trunk reads forward-only (no entity), the branch reads the full pass
        for h in 1..=6 {
            assert_eq!(
                tree.state(&trunk_id(h)).unwrap().atoms,
                BTreeSet::from(["label(O)".to_string()]),
                "trunk height {h}"
            );
        }
        assert_eq!(
            tree.state("s'2").unwrap().atoms,
            BTreeSet::from(["begin".to_string(), "label(video)".to_string()])
        );
        for h in 3..=6 {
            assert_eq!(
                tree.state(&primed_id(h)).unwrap().atoms,
                BTreeSet::from(["label(O)".to_string()])
            );
        }
        assert!(validate_btpk(&tree).is_empty());
        assert_eq!(tree.announcements().len(), anns.len());
    }

    #[test]
    fn corrected_path_follows_the_branch() {
        let m = testutil::and_gate_model();
        let ids = m.vocab.encode(&testutil::and_gate_sequence().tokens);
        let anns = extract_announcements(&m, &ids, &EntitySpan::new(1, 1, "video"), 1).unwrap();
        let tree = build_btpk(&m, &ids, &anns, &[1]).unwrap();
        let corrected: Vec<&str> = tree.corrected_path().iter().map(|s| s.id.as_str()).collect();
        assert_eq!(corrected, vec!["s0", "s1", "s'2", "s'3", "s'4", "s'5", "s'6"]);
        let trunk: Vec<&str> = tree.trunk_path().iter().map(|s| s.id.as_str()).collect();
        assert_eq!(trunk, vec!["s0", "s1", "s2", "s3", "s4", "s5", "s6"]);
    }

    #[test]
    fn branch_without_announcement_support_stays_unbranched() {
        let m = testutil::and_gate_model();
        let ids = m.vocab.encode(&testutil::and_gate_sequence().tokens);
        let tree = build_btpk(&m, &ids, &[], &[1]).unwrap();
        assert!(tree.rho_edges().is_empty());
        assert_eq!(tree.states().len(), 7);
        assert!(validate_btpk(&tree).is_empty());
    }

    #[test]
    fn gram_before_the_branch_is_not_support() {
        let m = testutil::and_gate_model();
        let ids = m.vocab.encode(&testutil::and_gate_sequence().tokens);
        let ann = Announcement {
            gram: GramSpan::new(0, 0),
            side: Side::Both,
            target: EntitySpan::new(1, 1, "video"),
            original_label: "video".into(),
            flipped_label: "O".into(),
        };
        let tree = build_btpk(&m, &ids, &[ann], &[1]).unwrap();
        assert!(tree.rho_edges().is_empty());
        assert!(tree.states().iter().all(|s| !s.primed));
    }

    #[test]
    fn from_parts_rejects_malformed_inputs() {
        let err = BtpkModel::from_parts(
            vec![state("s0", 0, false), state("s0", 1, false)],
            vec![],
            vec![],
            2,
            vec![],
            None,
        )
        .unwrap_err();
        assert!(matches!(err, BtpkError::DuplicateStateId(_)));

        let err = BtpkModel::from_parts(
            vec![state("s0", 0, false)],
            edges(&[("s0", "s9")]),
            vec![],
            1,
            vec![],
            None,
        )
        .unwrap_err();
        assert!(matches!(err, BtpkError::UnknownStateInEdge(_)));

        let err =
            BtpkModel::from_parts(vec![state("s1", 1, false)], vec![], vec![], 2, vec![], None)
                .unwrap_err();
        assert!(matches!(err, BtpkError::NoRoot));
    }

    #[test]
    fn validator_flags_height_jumps_and_extra_roots() {
        let m = BtpkModel::from_parts(
            vec![state("a", 0, false), state("b", 0, false), state("c", 2, false)],
            edges(&[("a", "c")]),
            vec![],
            3,
            vec![],
            None,
        )
        .unwrap();
        let v = validate_btpk(&m);
        assert!(v.iter().any(|s| s.contains("exactly one root")), "{v:?}");
        assert!(v.iter().any(|s| s.contains("jumps height")), "{v:?}");
        assert!(v.iter().any(|s| s.contains("no state at height 1")), "{v:?}");
    }

    #[test]
    fn validator_flags_cycles_and_multi_parents() {
        let m = BtpkModel::from_parts(
            vec![state("a", 0, false), state("b", 1, false), state("c", 2, false)],
            edges(&[("a", "b"), ("b", "c"), ("c", "b")]),
            vec![],
            3,
            vec![],
            None,
        )
        .unwrap();
        let v = validate_btpk(&m);
        assert!(v.iter().any(|s| s.contains("cycle")), "{v:?}");
        assert!(v.iter().any(|s| s.contains("2 r1 parents")), "{v:?}");
    }

    #[test]
    fn validator_flags_bad_rho_edges() {
        let m = BtpkModel::from_parts(
            vec![
                state("s0", 0, false),
                state("s1", 1, false),
                state("p1", 1, true),
                state("p2", 2, true),
            ],
            edges(&[("s0", "s1"), ("s0", "p1"), ("p1", "p2")]),
            edges(&[("s1", "p2"), ("p1", "s1")]),
            3,
            vec![],
            None,
        )
        .unwrap();
        let v = validate_btpk(&m);
        assert!(v.iter().any(|s| s.contains("crosses heights")), "{v:?}");
        assert!(v.iter().any(|s| s.contains("unprimed -> primed")), "{v:?}");
    }

    #[test]
    fn validator_flags_too_many_children() {
        let m = BtpkModel::from_parts(
            vec![
                state("r", 0, false),
                state("x", 1, false),
                state("y", 1, true),
                state("z", 1, true),
            ],
            edges(&[("r", "x"), ("r", "y"), ("r", "z")]),
            vec![],
            2,
            vec![],
            None,
        )
        .unwrap();
        let v = validate_btpk(&m);
        assert!(v.iter().any(|s| s.contains("3 r1 children")), "{v:?}");
    }

    #[test]
    fn validator_checks_the_edge_count_bound() {
        // a bare two-state chain missing its edge: 0 edges < n = 1
        let m = BtpkModel::from_parts(
            vec![state("s0", 0, false), state("s1", 1, false)],
            vec![],
            vec![],
            2,
            vec![],
            None,
        )
        .unwrap();
        let v = validate_btpk(&m);
        assert!(v.iter().any(|s| s.contains("edge count")), "{v:?}");
    }

    #[test]
    fn closure_of_a_chain_lists_every_ordered_pair() {
        let m = BtpkModel::from_parts(
            vec![state("s0", 0, false), state("s1", 1, false), state("s2", 2, false)],
            edges(&[("s0", "s1"), ("s1", "s2")]),
            vec![],
            3,
            vec![],
            None,
        )
        .unwrap();
        let got = transitive_closure(&m);
        let want: BTreeSet<(String, String)> = [("s0", "s1"), ("s0", "s2"), ("s1", "s2")]
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        assert_eq!(got, want);
    }

    /// Oracle: reachability as boolean matrix powers A ∨ A² ∨ … ∨ Aⁿ.
    fn closure_by_matrix_powers(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<bool>> {
        let mut a = vec![vec![false; n]; n];
        for &(i, j) in edges {
            a[i][j] = true;
        }
        let mut acc = a.clone();
        let mut power = a.clone();
        for _ in 1..n {
            let mut next = vec![vec![false; n]; n];
            for i in 0..n {
                for j in 0..n {
                    next[i][j] = (0..n).any(|k| power[i][k] && a[k][j]);
                }
            }
            for i in 0..n {
                for j in 0..n {
                    acc[i][j] |= next[i][j];
                }
            }
            power = next;
        }
        acc
    }

    #[test]
    fn closure_matches_matrix_power_oracle_on_random_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..60 {
            let n = rng.gen_range(1..=8);
            let mut states = vec![state("n0", 0, false)];
            for i in 1..n {
                states.push(state(&format!("n{i}"), rng.gen_range(0..n), rng.gen_bool(0.5)));
            }
            let mut raw = Vec::new();
            let mut named = Vec::new();
            for _ in 0..rng.gen_range(0..=2 * n) {
                let (i, j) = (rng.gen_range(0..n), rng.gen_range(0..n));
                raw.push((i, j));
                named.push((format!("n{i}"), format!("n{j}")));
            }
            let m = BtpkModel::from_parts(states, named, vec![], n, vec![], None).unwrap();
            let got = transitive_closure(&m);
            let want = closure_by_matrix_powers(n, &raw);
            for i in 0..n {
                for j in 0..n {
                    assert_eq!(
                        want[i][j],
                        got.contains(&(format!("n{i}"), format!("n{j}"))),
                        "pair n{i} n{j}"
                    );
                }
            }
        }
    }

    #[test]
    fn json_shape_is_pinned() {
        let m = BtpkModel::from_parts(
            vec![
                BtpkState {
                    id: "s0".into(),
                    height: 0,
                    primed: false,
                    atoms: BTreeSet::from(["start".to_string()]),
                },
                BtpkState {
                    id: "s1".into(),
                    height: 1,
                    primed: false,
                    atoms: BTreeSet::from(["label(O)".to_string()]),
                },
            ],
            edges(&[("s0", "s1")]),
            vec![],
            2,
            vec![],
            None,
        )
        .unwrap();
        assert_eq!(
            serde_json::to_string(&m).unwrap(),
            r#"{"height":2,"states":[{"id":"s0","h":0,"primed":false,"atoms":["start"]},{"id":"s1","h":1,"primed":false,"atoms":["label(O)"]}],"r1":[["s0","s1"]],"rho":[],"announcements":[]}"#
        );
    }

    #[test]
    fn json_round_trips_with_run_metadata() {
        let m = testutil::and_gate_model();
        let ids = m.vocab.encode(&testutil::and_gate_sequence().tokens);
        let anns = extract_announcements(&m, &ids, &EntitySpan::new(1, 1, "video"), 2).unwrap();
        let mut tree = build_btpk(&m, &ids, &anns, &[1]).unwrap();
        tree.set_run_info(serde_json::json!({"seed": 7}));
        let text = serde_json::to_string_pretty(&tree).unwrap();
        let back: BtpkModel = serde_json::from_str(&text).unwrap();
        assert_eq!(back, tree);
        assert!(text.contains("\"run\""));
    }
}
