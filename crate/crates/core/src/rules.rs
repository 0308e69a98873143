//! Cross-graph Horn rules mined from a merged graph by exact grounding counts.

use std::collections::{HashMap, HashSet};
use std::fmt::{self, Write as _};

use rayon::prelude::*;

use crate::kg::KnowledgeGraph;

/// Variable pattern of a rule body; the head is always `h(X, Y)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RuleShape {
    /// `b(X, Y)`
    Same,
    /// `b(Y, X)`
    Inverse,
    /// `b1(X, Z) ∧ b2(Z, Y)`
    Chain,
    /// `b1(Z, X) ∧ b2(Z, Y)`
    CommonParent,
    /// `b1(X, Z) ∧ b2(Y, Z)`
    CommonChild,
    /// `b1(Z, X) ∧ b2(Y, Z)`
    InverseChain,
}

impl RuleShape {
    pub const ONE_HOP: [RuleShape; 2] = [RuleShape::Same, RuleShape::Inverse];
    pub const TWO_HOP: [RuleShape; 4] = [
        RuleShape::Chain,
        RuleShape::CommonParent,
        RuleShape::CommonChild,
        RuleShape::InverseChain,
    ];

    pub fn body_len(self) -> usize {
        match self {
            RuleShape::Same | RuleShape::Inverse => 1,
            _ => 2,
        }
    }

    /// Argument variables of each body atom.
    pub fn arguments(self) -> &'static [(char, char)] {
        match self {
            RuleShape::Same => &[('X', 'Y')],
            RuleShape::Inverse => &[('Y', 'X')],
            RuleShape::Chain => &[('X', 'Z'), ('Z', 'Y')],
            RuleShape::CommonParent => &[('Z', 'X'), ('Z', 'Y')],
            RuleShape::CommonChild => &[('X', 'Z'), ('Y', 'Z')],
            RuleShape::InverseChain => &[('Z', 'X'), ('Y', 'Z')],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HornRule {
    pub head: String,
    /// Body relations, in the order of [`RuleShape::arguments`].
    pub body: Vec<String>,
    pub shape: RuleShape,
    /// Distinct `(X, Y)` satisfying head and body.
    pub support: usize,
    /// Distinct `(X, Y)` satisfying the body.
    pub body_support: usize,
    pub confidence: f64,
}

impl HornRule {
    pub fn head_text(&self) -> String {
        format!("{}(X,Y)", self.head)
    }

    pub fn body_text(&self) -> String {
        self.body
            .iter()
            .zip(self.shape.arguments())
            .map(|(r, (a, b))| format!("{r}({a},{b})"))
            .collect::<Vec<_>>()
            .join(" ∧ ")
    }
}

impl fmt::Display for HornRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ⇐ {}", self.head_text(), self.body_text())
    }
}

/// Text before the first `:`; empty when there is none.
pub fn namespace(relation: &str) -> &str {
    relation.split_once(':').map_or("", |(ns, _)| ns)
}

type Pair = (u32, u32);

struct Index {
    pairs: Vec<HashSet<Pair>>,
    out: Vec<HashMap<u32, Vec<u32>>>,
    inc: Vec<HashMap<u32, Vec<u32>>>,
    /// Relations holding for each pair.
    heads: HashMap<Pair, Vec<usize>>,
}

impl Index {
    fn new(kg: &KnowledgeGraph) -> Self {
        let n = kg.num_relations();
        let mut idx = Index {
            pairs: vec![HashSet::new(); n],
            out: vec![HashMap::new(); n],
            inc: vec![HashMap::new(); n],
            heads: HashMap::new(),
        };
        for t in kg.triplets() {
            let r = t.relation as usize;
            if kg.is_reverse_relation(t.relation) || !idx.pairs[r].insert((t.subject, t.object)) {
                continue;
            }
            idx.out[r].entry(t.subject).or_default().push(t.object);
            idx.inc[r].entry(t.object).or_default().push(t.subject);
            idx.heads.entry((t.subject, t.object)).or_default().push(r);
        }
        idx
    }

    /// Distinct `(X, Y)` groundings of a body, `X ≠ Y`.
    fn body(&self, shape: RuleShape, b1: usize, b2: usize) -> HashSet<Pair> {
        let mut out = HashSet::new();
        let mut add = |x: u32, y: u32| {
            if x != y {
                out.insert((x, y));
            }
        };
        match shape {
            RuleShape::Same => self.pairs[b1].iter().for_each(|&(x, y)| add(x, y)),
            RuleShape::Inverse => self.pairs[b1].iter().for_each(|&(y, x)| add(x, y)),
            RuleShape::Chain => {
                for &(x, z) in &self.pairs[b1] {
                    for &y in self.out[b2].get(&z).into_iter().flatten() {
                        add(x, y);
                    }
                }
            }
            RuleShape::CommonParent => {
                for &(z, x) in &self.pairs[b1] {
                    for &y in self.out[b2].get(&z).into_iter().flatten() {
                        add(x, y);
                    }
                }
            }
            RuleShape::CommonChild => {
                for &(x, z) in &self.pairs[b1] {
                    for &y in self.inc[b2].get(&z).into_iter().flatten() {
                        add(x, y);
                    }
                }
            }
            RuleShape::InverseChain => {
                for &(z, x) in &self.pairs[b1] {
                    for &y in self.inc[b2].get(&z).into_iter().flatten() {
                        add(x, y);
                    }
                }
            }
        }
        out
    }
}

/// Mines rules whose head namespace differs from every body namespace.
/// `max_body` is 1 or 2 (values above 2 are treated as 2). Returns rules
/// meeting both thresholds, sorted by confidence, then support (both
/// descending), then text.
pub fn mine_rules(joint: &KnowledgeGraph, max_body: usize, min_confidence: f64, min_support: usize) -> Vec<HornRule> {
    let idx = Index::new(joint);
    let n = joint.num_relations();
    let names: Vec<&str> = (0..n as u32).map(|r| joint.relation_name(r)).collect();
    let active: Vec<usize> = (0..n).filter(|&r| !idx.pairs[r].is_empty()).collect();

    let mut bodies: Vec<(RuleShape, usize, usize)> = Vec::new();
    if max_body >= 1 {
        for &b in &active {
            for s in RuleShape::ONE_HOP {
                bodies.push((s, b, b));
            }
        }
    }
    if max_body >= 2 {
        for &b1 in &active {
            for &b2 in &active {
                for s in RuleShape::TWO_HOP {
                    bodies.push((s, b1, b2));
                }
            }
        }
    }

    let names = &names;
    let mut rules: Vec<HornRule> = bodies
        .par_iter()
        .flat_map_iter(|&(shape, b1, b2)| {
            let body_ns = [namespace(names[b1]), namespace(names[b2])];
            let grounded = idx.body(shape, b1, b2);
            let mut support: HashMap<usize, usize> = HashMap::new();
            for p in &grounded {
                for &h in idx.heads.get(p).into_iter().flatten() {
                    if !body_ns.contains(&namespace(names[h])) {
                        *support.entry(h).or_insert(0) += 1;
                    }
                }
            }
            let body_support = grounded.len();
            let body: Vec<String> = if shape.body_len() == 1 {
                vec![names[b1].to_owned()]
            } else {
                vec![names[b1].to_owned(), names[b2].to_owned()]
            };
            support
                .into_iter()
                .filter(move |&(_, s)| s >= min_support && s as f64 / body_support as f64 >= min_confidence)
                .map(move |(h, s)| HornRule {
                    head: names[h].to_owned(),
                    body: body.clone(),
                    shape,
                    support: s,
                    body_support,
                    confidence: s as f64 / body_support as f64,
                })
        })
        .collect();
    rules.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(b.support.cmp(&a.support))
            .then_with(|| a.to_string().cmp(&b.to_string()))
    });
    rules
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RuleFormat {
    Text,
    Tsv,
}

impl RuleFormat {
    pub fn parse(s: &str) -> crate::Result<Self> {
        match s {
            "text" => Ok(RuleFormat::Text),
            "tsv" => Ok(RuleFormat::Tsv),
            _ => Err(crate::Error::config(format!("unknown rule format {s:?} (text|tsv)"))),
        }
    }
}

/// Rule table in the given order, confidence to two decimals.
pub fn rule_report(rules: &[HornRule], format: RuleFormat) -> String {
    let header = ["Rule head", "Rule body", "Conf.", "Support", "Body support"];
    let rows: Vec<[String; 5]> = rules
        .iter()
        .map(|r| {
            [
                r.head_text(),
                r.body_text(),
                format!("{:.2}", r.confidence),
                r.support.to_string(),
                r.body_support.to_string(),
            ]
        })
        .collect();
    let mut s = String::new();
    match format {
        RuleFormat::Tsv => {
            let _ = writeln!(s, "head\tbody\tconfidence\tsupport\tbody_support");
            for r in &rows {
                let _ = writeln!(s, "{}", r.join("\t"));
            }
        }
        RuleFormat::Text => {
            let mut width = header.map(|h| h.chars().count());
            for r in &rows {
                for (w, c) in width.iter_mut().zip(r) {
                    *w = (*w).max(c.chars().count());
                }
            }
            let line = |cells: &[&str]| {
                let padded: Vec<String> = cells
                    .iter()
                    .zip(width)
                    .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                    .collect();
                padded.join("  ").trim_end().to_owned()
            };
            let _ = writeln!(s, "{}", line(&header));
            for r in &rows {
                let cells: Vec<&str> = r.iter().map(String::as_str).collect();
                let _ = writeln!(s, "{}", line(&cells));
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(triplets: &[(&str, &str, &str)]) -> KnowledgeGraph {
        let mut kg = KnowledgeGraph::new("J");
        for (s, r, o) in triplets {
            kg.add_named(s, r, o).unwrap();
        }
        kg
    }

    fn find<'a>(rules: &'a [HornRule], head: &str, body: &[&str], shape: RuleShape) -> Option<&'a HornRule> {
        rules
            .iter()
            .find(|r| r.head == head && r.shape == shape && r.body.iter().map(String::as_str).eq(body.iter().copied()))
    }

    #[test]
    fn perfect_one_hop() {
        let kg = graph(&[
            ("a", "WD:foundedBy", "x"),
            ("b", "WD:foundedBy", "y"),
            ("a", "YG:founder", "x"),
            ("b", "YG:founder", "y"),
        ]);
        let rules = mine_rules(&kg, 1, 0.5, 1);
        let r = find(&rules, "YG:founder", &["WD:foundedBy"], RuleShape::Same).unwrap();
        assert_eq!(r.confidence, 1.0);
        assert_eq!((r.support, r.body_support), (2, 2));
        assert!(rules.iter().all(|r| namespace(&r.head) != namespace(&r.body[0])));
    }

    #[test]
    fn grandfather_two_thirds() {
        // Three father-father chains, two carrying the grandfather edge.
        let kg = graph(&[
            ("a", "A:father", "b"),
            ("b", "A:father", "c"),
            ("d", "A:father", "e"),
            ("e", "A:father", "f"),
            ("g", "A:father", "h"),
            ("h", "A:father", "i"),
            ("a", "B:grandfather", "c"),
            ("d", "B:grandfather", "f"),
        ]);
        let rules = mine_rules(&kg, 2, 0.0, 1);
        let r = find(&rules, "B:grandfather", &["A:father", "A:father"], RuleShape::Chain).unwrap();
        assert!((r.confidence - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!((r.support, r.body_support), (2, 3));
        assert!(mine_rules(&kg, 2, 0.0, 3).is_empty());
    }

    #[test]
    fn report_formats() {
        let empty = rule_report(&[], RuleFormat::Text);
        assert_eq!(empty.lines().count(), 1);
        assert!(empty.starts_with("Rule head"));
        let rule = HornRule {
            head: "YG:hasChild".into(),
            body: vec!["WD:father".into(), "WD:mother".into()],
            shape: RuleShape::CommonParent,
            support: 4,
            body_support: 6,
            confidence: 4.0 / 6.0,
        };
        let text = rule_report(std::slice::from_ref(&rule), RuleFormat::Text);
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("0.67"));
        assert!(text.contains("WD:father(Z,X) ∧ WD:mother(Z,Y)"));
        let tsv = rule_report(&[rule], RuleFormat::Tsv);
        assert_eq!(tsv.lines().nth(1).unwrap().split('\t').count(), 5);
    }

    #[test]
    fn ordering_by_confidence() {
        let kg = graph(&[
            ("a", "A:p", "b"),
            ("c", "A:p", "d"),
            ("e", "A:p", "f"),
            ("a", "B:q", "b"),
            ("c", "B:q", "d"),
            ("e", "B:q", "f"),
            ("a", "A:s", "b"),
            ("c", "A:s", "d"),
            ("g", "A:s", "h"),
            ("a", "A:t", "b"),
            ("g", "A:t", "h"),
            ("i", "A:t", "j"),
        ]);
        let rules = mine_rules(&kg, 1, 0.0, 1);
        assert!(rules.len() >= 3);
        assert!(rules.windows(2).all(|w| w[0].confidence >= w[1].confidence));
        let report = rule_report(&rules, RuleFormat::Tsv);
        let confs: Vec<f64> = report
            .lines()
            .skip(1)
            .map(|l| l.split('\t').nth(2).unwrap().parse().unwrap())
            .collect();
        assert!(confs.windows(2).all(|w| w[0] >= w[1]));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        const RELS: [&str; 4] = ["A:p", "A:q", "B:r", "B:s"];

        fn build(raw: &[(u8, u8, u8)]) -> KnowledgeGraph {
            let mut kg = KnowledgeGraph::new("J");
            for (s, r, o) in raw {
                kg.add_named(&format!("e{s}"), RELS[*r as usize], &format!("e{o}")).unwrap();
            }
            kg
        }

        /// Naive loop over all entity assignments.
        fn oracle(kg: &KnowledgeGraph, rule: &HornRule) -> (usize, usize) {
            let n = kg.num_entities() as u32;
            let rel = |name: &str| kg.relations().get(name).unwrap();
            let holds = |r: u32, a: u32, b: u32| kg.contains(&crate::kg::Triplet::new(a, r, b));
            let h = rel(&rule.head);
            let b: Vec<u32> = rule.body.iter().map(|x| rel(x)).collect();
            let (mut sup, mut body) = (0, 0);
            for x in 0..n {
                for y in 0..n {
                    if x == y {
                        continue;
                    }
                    let val = |v: char, z: u32| match v {
                        'X' => x,
                        'Y' => y,
                        _ => z,
                    };
                    let ok = (0..n).any(|z| {
                        rule.shape
                            .arguments()
                            .iter()
                            .zip(&b)
                            .all(|(&(a, c), &r)| holds(r, val(a, z), val(c, z)))
                    });
                    if ok {
                        body += 1;
                        if holds(h, x, y) {
                            sup += 1;
                        }
                    }
                }
            }
            (sup, body)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn counts_match_join_oracle(raw in proptest::collection::vec((0u8..7, 0u8..4, 0u8..7), 1..30)) {
                let kg = build(&raw);
                let rules = mine_rules(&kg, 2, 0.0, 1);
                for r in &rules {
                    prop_assert_eq!((r.support, r.body_support), oracle(&kg, r), "{}", r);
                    prop_assert!(r.support <= r.body_support);
                    prop_assert!((0.0..=1.0).contains(&r.confidence));
                    prop_assert!(r.body.iter().all(|b| namespace(b) != namespace(&r.head)));
                }
            }

            #[test]
            fn body_only_triplet_never_raises_confidence(
                raw in proptest::collection::vec((0u8..6, 0u8..4, 0u8..6), 1..20),
                extra in 0u8..6,
            ) {
                // An A:p edge to a fresh entity grounds bodies only: no head
                // atom can mention the fresh entity.
                let kg = build(&raw);
                let mut more = raw.clone();
                more.push((extra, 0, 99));
                let kg2 = build(&more);
                let before = mine_rules(&kg, 2, 0.0, 1);
                let after = mine_rules(&kg2, 2, 0.0, 1);
                for r in before.iter().filter(|r| namespace(&r.head) == "B") {
                    let same = after.iter().find(|a| a.head == r.head && a.body == r.body && a.shape == r.shape);
                    if let Some(a) = same {
                        prop_assert!(a.confidence <= r.confidence + 1e-15);
                    }
                }
            }
        }
    }
}
