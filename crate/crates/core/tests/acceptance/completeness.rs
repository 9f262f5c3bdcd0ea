//! Completeness findings against a brute-force oracle.
//!
//! The oracle works on the raw case (requirements, artifact history, links)
//! and walks the graph itself; it never looks at the matrix. Two tiers feed
//! it: every small store shape with every subset of its legal links, and
//! seeded stores at the full size bound (8 requirements, 16 artifacts).

use std::collections::{BTreeMap, BTreeSet};

use certiflow_core::canonical::{Provenance, Timestamp};
use certiflow_core::req_store::{RequirementStatus, RequirementStore, StoreId};
use certiflow_core::tag_parser::{LineSpan, RequirementDraft, RequirementKind};
use certiflow_core::trace::{
    build_matrix, completeness_check, ArtifactIndex, ArtifactKind, ArtifactRecord, EntityRef,
    LinkKind, LinkSet, TraceLink,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::support::Verdict;

const MAX_REQS: usize = 8;
const MAX_ARTIFACTS: usize = 16;
const SEEDED_CASES: u64 = 4000;
/// Shapes whose candidate link count exceeds this are left to the seeded tier.
const MAX_EXHAUSTIVE_LINKS: usize = 11;

use RequirementKind::{Hlr, Llr, System};

#[derive(Clone, Debug)]
struct Req {
    kind: RequirementKind,
    parents: Vec<usize>,
    status: RequirementStatus,
}

#[derive(Clone, Debug)]
enum Event {
    /// Artifact slot, commit number.
    Register(usize, u32),
    Delete(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Node {
    Req(usize),
    /// Slot and commit of one registered version.
    Art(usize, u32),
}

#[derive(Clone, Debug)]
struct Case {
    reqs: Vec<Req>,
    /// Kind of each artifact slot; a slot is one path.
    slots: Vec<ArtifactKind>,
    events: Vec<Event>,
    links: Vec<(LinkKind, Node, Node)>,
}

fn path(slot: usize, kind: ArtifactKind) -> String {
    let dir = match kind {
        ArtifactKind::Source => "src",
        ArtifactKind::UnitTest => "tests/unit",
        ArtifactKind::IntegrationTest => "tests/integration",
        ArtifactKind::HsiTest => "tests/hsi",
        ArtifactKind::SystemTest => "tests/system",
        ArtifactKind::TestReport => "tests/reports",
        ArtifactKind::DesignDoc => "docs/design",
        _ => "docs/other",
    };
    format!("{dir}/a{slot}.txt")
}

fn art_id(case: &Case, slot: usize, commit: u32) -> String {
    let kind = case.slots[slot];
    format!("{}:{}@c{commit}", kind.as_str(), path(slot, kind))
}

fn is_test(k: ArtifactKind) -> bool {
    matches!(
        k,
        ArtifactKind::UnitTest
            | ArtifactKind::IntegrationTest
            | ArtifactKind::HsiTest
            | ArtifactKind::SystemTest
    )
}

/// Whether a link of `kind` may join these endpoint kinds.
fn legal(case: &Case, kind: LinkKind, from: Node, to: Node) -> bool {
    use ArtifactKind as A;
    let r = |n: Node| match n {
        Node::Req(i) => Some(case.reqs[i].kind),
        Node::Art(..) => None,
    };
    let a = |n: Node| match n {
        Node::Art(s, _) => Some(case.slots[s]),
        Node::Req(_) => None,
    };
    match kind {
        LinkKind::Derives => matches!(
            (r(from), r(to)),
            (Some(System), Some(Hlr)) | (Some(Hlr), Some(Llr))
        ),
        LinkKind::Implements => {
            matches!(
                (r(from), a(to)),
                (Some(Llr), Some(A::Source)) | (Some(_), Some(A::DesignDoc))
            )
        }
        LinkKind::Verifies => matches!(
            (a(from), r(to)),
            (Some(A::UnitTest), Some(Llr))
                | (Some(A::IntegrationTest), Some(Hlr | Llr))
                | (Some(A::HsiTest | A::SystemTest), Some(System | Hlr))
        ),
        LinkKind::Reports => a(from) == Some(A::TestReport) && a(to).is_some_and(is_test),
        LinkKind::Reviews => false,
    }
}

/// Every registered version, in event order.
fn versions(case: &Case) -> Vec<Node> {
    case.events
        .iter()
        .filter_map(|e| match e {
            Event::Register(s, c) => Some(Node::Art(*s, *c)),
            Event::Delete(_) => None,
        })
        .collect()
}

fn candidates(case: &Case) -> Vec<(LinkKind, Node, Node)> {
    let mut nodes: Vec<Node> = (0..case.reqs.len()).map(Node::Req).collect();
    nodes.extend(versions(case));
    let mut out = Vec::new();
    for kind in [
        LinkKind::Derives,
        LinkKind::Implements,
        LinkKind::Verifies,
        LinkKind::Reports,
    ] {
        for &from in &nodes {
            for &to in &nodes {
                if from != to && legal(case, kind, from, to) {
                    out.push((kind, from, to));
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Oracle

type Expected = (String, String, Option<String>);

fn oracle(case: &Case, ids: &[StoreId]) -> Vec<Expected> {
    // currency: the newest version of a path, unless the path's last event
    // is a deletion
    let mut newest: BTreeMap<usize, u32> = BTreeMap::new();
    let mut gone: BTreeSet<usize> = BTreeSet::new();
    for e in &case.events {
        match *e {
            Event::Register(s, c) => {
                newest.insert(s, c);
                gone.remove(&s);
            }
            Event::Delete(s) => {
                gone.insert(s);
            }
        }
    }
    let current = |n: Node| match n {
        Node::Art(s, c) => newest.get(&s) == Some(&c) && !gone.contains(&s),
        Node::Req(_) => false,
    };
    let kind_of = |n: Node| match n {
        Node::Art(s, _) => Some(case.slots[s]),
        Node::Req(_) => None,
    };

    let n = case.reqs.len();
    let mut children: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for (i, r) in case.reqs.iter().enumerate() {
        for &p in &r.parents {
            children[p].insert(i);
        }
    }
    for &(k, from, to) in &case.links {
        if let (LinkKind::Derives, Node::Req(a), Node::Req(b)) = (k, from, to) {
            children[a].insert(b);
        }
    }
    let reach = |start: usize| -> BTreeSet<usize> {
        let mut seen = BTreeSet::new();
        let mut todo = vec![start];
        while let Some(x) = todo.pop() {
            if seen.insert(x) {
                todo.extend(children[x].iter().copied());
            }
        }
        seen
    };
    // current artifacts joined to requirement `r` by `kind`, either direction
    let linked = |r: usize, kind: LinkKind| -> Vec<Node> {
        case.links
            .iter()
            .filter(|l| l.0 == kind)
            .filter_map(|&(_, from, to)| match (from, to) {
                (Node::Req(x), a @ Node::Art(..)) | (a @ Node::Art(..), Node::Req(x)) if x == r => {
                    Some(a)
                }
                _ => None,
            })
            .filter(|&a| current(a))
            .collect()
    };

    let mut out = Vec::new();
    let mut emit = |cat: &str, r: usize, test: Option<String>| {
        out.push((cat.to_string(), ids[r].to_string(), test))
    };
    for (r, req) in case.reqs.iter().enumerate() {
        let below = reach(r);
        let verifying = |q: usize, k: ArtifactKind| {
            linked(q, LinkKind::Verifies)
                .into_iter()
                .any(|a| kind_of(a) == Some(k))
        };
        match req.kind {
            Hlr => {
                if !children[r].iter().any(|&c| case.reqs[c].kind == Llr) {
                    emit("HLR_WITHOUT_LLR", r, None);
                }
                if !below
                    .iter()
                    .any(|&q| verifying(q, ArtifactKind::IntegrationTest))
                {
                    emit("HLR_WITHOUT_INTEGRATION_TEST", r, None);
                }
            }
            Llr => {
                let sourced = below.iter().any(|&q| {
                    linked(q, LinkKind::Implements)
                        .into_iter()
                        .any(|a| kind_of(a) == Some(ArtifactKind::Source))
                });
                if !sourced {
                    emit("LLR_WITHOUT_SOURCE", r, None);
                }
                if !verifying(r, ArtifactKind::UnitTest) {
                    emit("LLR_WITHOUT_UNIT_TEST", r, None);
                }
            }
            System => {}
        }
        let tests: BTreeSet<Node> = linked(r, LinkKind::Verifies).into_iter().collect();
        for &t in &tests {
            let reported = case
                .links
                .iter()
                .any(|&(k, from, to)| k == LinkKind::Reports && to == t && current(from));
            if !reported {
                let Node::Art(s, c) = t else { unreachable!() };
                emit("TEST_WITHOUT_REPORT", r, Some(art_id(case, s, c)));
            }
        }
        let downstream = !children[r].is_empty()
            || !tests.is_empty()
            || !linked(r, LinkKind::Implements).is_empty()
            || below
                .iter()
                .any(|&q| !linked(q, LinkKind::Implements).is_empty());
        if req.status == RequirementStatus::Draft && downstream {
            emit("REQUIREMENT_NOT_REVIEWED", r, None);
        }
    }
    out.sort();
    out
}

// ---------------------------------------------------------------------------
// The same case through the library

fn prov() -> Provenance {
    let at: Timestamp = "2025-02-02T00:00:00Z".parse().unwrap();
    Provenance::new("oracle", at).unwrap()
}

const CHECKLIST: &str = "REVIEW_CHECKLIST:docs/reviews/review.md@c0";

struct Built {
    store: RequirementStore,
    index: ArtifactIndex,
    ids: Vec<StoreId>,
}

fn build_base(case: &Case) -> Built {
    let p = prov();
    let key = |i: usize| format!("K-{}-{i}", case.reqs[i].kind.id_prefix());
    let drafts: Vec<RequirementDraft> = case
        .reqs
        .iter()
        .enumerate()
        .map(|(i, r)| RequirementDraft {
            local_key: key(i),
            kind: r.kind,
            title: format!("R{i}"),
            text: format!("Requirement {i}."),
            parent_keys: r.parents.iter().map(|&p| key(p)).collect(),
            source_path: "docs/spec/all.req".into(),
            line_span: LineSpan {
                start: i as u32 + 1,
                end: i as u32 + 1,
            },
        })
        .collect();
    let mut store = RequirementStore::new();
    let outcome = store.import_requirements(&drafts, &p).expect("import");
    let ids: Vec<StoreId> = (0..case.reqs.len())
        .map(|i| outcome.mapping[&key(i)])
        .collect();

    let mut index = ArtifactIndex::new();
    let review = ArtifactRecord::new(
        ArtifactKind::ReviewChecklist,
        "docs/reviews/review.md",
        "c0",
        "h",
        ArtifactKind::ReviewChecklist.default_stage(),
        vec![],
        &p,
    );
    index.register(review, &|_| true).unwrap();
    for (i, r) in case.reqs.iter().enumerate() {
        let mut s = RequirementStatus::Draft;
        while s != r.status {
            s = s.next().unwrap();
            store.set_status(&ids[i], s, CHECKLIST, &p).unwrap();
        }
    }
    for e in &case.events {
        match *e {
            Event::Register(slot, commit) => {
                let kind = case.slots[slot];
                let rec = ArtifactRecord::new(
                    kind,
                    &path(slot, kind),
                    &format!("c{commit}"),
                    &format!("h{commit}"),
                    kind.default_stage(),
                    vec![],
                    &p,
                );
                index.register(rec, &|_| true).unwrap();
            }
            Event::Delete(slot) => index.mark_deleted(&path(slot, case.slots[slot]), "cdel"),
        }
    }
    Built { store, index, ids }
}

fn entity(case: &Case, built: &Built, n: Node) -> EntityRef {
    match n {
        Node::Req(i) => EntityRef::Requirement(built.ids[i]),
        Node::Art(s, c) => EntityRef::Artifact(art_id(case, s, c)),
    }
}

/// Findings as (category, store id, test id), plus any ordering complaint.
fn actual(case: &Case, built: &Built) -> Result<Vec<Expected>, String> {
    let p = prov();
    let mut links = LinkSet::new();
    for &(k, from, to) in &case.links {
        let l = TraceLink::new(
            entity(case, built, from),
            entity(case, built, to),
            k,
            "c9",
            &p,
        );
        links
            .add_link(l, &built.store, &built.index)
            .map_err(|e| format!("link refused: {e}"))?;
    }
    let matrix =
        build_matrix(&built.store, &built.index, &links, p.at).map_err(|e| e.to_string())?;
    let findings = completeness_check(&matrix);
    if findings
        .windows(2)
        .any(|w| (w[0].category, w[0].store_id) > (w[1].category, w[1].store_id))
    {
        return Err("findings not sorted by (category, store_id)".into());
    }
    let mut out: Vec<Expected> = findings
        .iter()
        .map(|f| {
            let test = (f.category.as_str() == "TEST_WITHOUT_REPORT").then(|| {
                f.detail
                    .strip_suffix(" has no report")
                    .unwrap_or(&f.detail)
                    .to_string()
            });
            (
                f.category.as_str().to_string(),
                f.store_id.to_string(),
                test,
            )
        })
        .collect();
    out.sort();
    Ok(out)
}

#[derive(Default)]
struct Tally {
    cases: u64,
    findings: u64,
    max_reqs: usize,
    max_arts: usize,
    failures: Vec<String>,
}

impl Tally {
    fn compare(&mut self, label: &str, case: &Case, built: &Built) {
        self.cases += 1;
        self.max_reqs = self.max_reqs.max(case.reqs.len());
        self.max_arts = self.max_arts.max(versions(case).len());
        let want = oracle(case, &built.ids);
        self.findings += want.len() as u64;
        match actual(case, built) {
            Ok(got) if got == want => {}
            Ok(got) => self.failures.push(format!(
                "{label}: {case:?}\n      want {want:?}\n      got  {got:?}"
            )),
            Err(e) => self.failures.push(format!("{label}: {e} for {case:?}")),
        }
    }
}

// ---------------------------------------------------------------------------
// Tier 1: every shape of up to three requirements, every link subset

fn shapes(n: usize) -> Vec<Vec<Req>> {
    let mut out: Vec<Vec<Req>> = vec![Vec::new()];
    for i in 0..n {
        let mut next = Vec::new();
        for prefix in &out {
            for kind in RequirementKind::ALL {
                let parent_kind = kind.parent_kind();
                let options: Vec<usize> = (0..i)
                    .filter(|&p| Some(prefix[p].kind) == parent_kind)
                    .collect();
                // no parent, or exactly one of the eligible earlier requirements
                let mut parent_sets = vec![vec![]];
                parent_sets.extend(options.iter().map(|&p| vec![p]));
                for parents in parent_sets {
                    for status in [RequirementStatus::Draft, RequirementStatus::Reviewed] {
                        let mut s = prefix.clone();
                        s.push(Req {
                            kind,
                            parents: parents.clone(),
                            status,
                        });
                        next.push(s);
                    }
                }
            }
        }
        out = next;
    }
    out
}

fn exhaustive(t: &mut Tally) -> (u64, u64) {
    use ArtifactKind as A;
    // one version each of a source, a unit test, an integration test and a report
    let palette = vec![A::Source, A::UnitTest, A::IntegrationTest, A::TestReport];
    let events: Vec<Event> = (0..palette.len()).map(|s| Event::Register(s, 1)).collect();
    let mut shapes_done = 0;
    let mut skipped = 0;
    for n in 1..=3 {
        for reqs in shapes(n) {
            let mut case = Case {
                reqs,
                slots: palette.clone(),
                events: events.clone(),
                links: vec![],
            };
            let cands = candidates(&case);
            if cands.len() > MAX_EXHAUSTIVE_LINKS {
                skipped += 1;
                continue;
            }
            shapes_done += 1;
            let built = build_base(&case);
            for mask in 0u32..(1 << cands.len()) {
                case.links = cands
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| mask & (1 << i) != 0)
                    .map(|(_, l)| *l)
                    .collect();
                t.compare(&format!("shape {shapes_done} mask {mask:b}"), &case, &built);
            }
        }
    }
    (shapes_done, skipped)
}

// ---------------------------------------------------------------------------
// Tier 2: seeded stores up to the size bound, with history

fn seeded(seed: u64) -> Case {
    use ArtifactKind as A;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=MAX_REQS);
    let mut reqs: Vec<Req> = Vec::new();
    for i in 0..n {
        let kind = *RequirementKind::ALL.choose(&mut rng).unwrap();
        let eligible: Vec<usize> = (0..i)
            .filter(|&p| Some(reqs[p].kind) == kind.parent_kind())
            .collect();
        let mut parents: Vec<usize> = eligible.into_iter().filter(|_| rng.gen_bool(0.4)).collect();
        parents.truncate(2);
        let status = *[
            RequirementStatus::Draft,
            RequirementStatus::Reviewed,
            RequirementStatus::Baselined,
        ]
        .choose(&mut rng)
        .unwrap();
        reqs.push(Req {
            kind,
            parents,
            status,
        });
    }

    let palette = [
        A::Source,
        A::UnitTest,
        A::IntegrationTest,
        A::HsiTest,
        A::SystemTest,
        A::TestReport,
        A::DesignDoc,
    ];
    let budget = rng.gen_range(1..=MAX_ARTIFACTS);
    let mut slots = Vec::new();
    let mut events = Vec::new();
    let mut registered = 0;
    let mut commit = 1;
    while registered < budget {
        // a new path, or another version / deletion of an existing one
        if slots.is_empty() || rng.gen_bool(0.6) {
            slots.push(*palette.choose(&mut rng).unwrap());
            events.push(Event::Register(slots.len() - 1, commit));
            registered += 1;
        } else {
            let s = rng.gen_range(0..slots.len());
            if rng.gen_bool(0.25) {
                events.push(Event::Delete(s));
            } else {
                events.push(Event::Register(s, commit));
                registered += 1;
            }
        }
        commit += 1;
    }
    let mut case = Case {
        reqs,
        slots,
        events,
        links: vec![],
    };
    let density = rng.gen_range(0.05..0.6);
    case.links = candidates(&case)
        .into_iter()
        .filter(|_| rng.gen_bool(density))
        .collect();
    case
}

pub fn check() -> Verdict {
    let mut t = Tally::default();
    let (shapes_done, skipped) = exhaustive(&mut t);
    let exhaustive_cases = t.cases;
    for seed in 0..SEEDED_CASES {
        let case = seeded(seed);
        let built = build_base(&case);
        t.compare(&format!("seed {seed}"), &case, &built);
    }
    if t.max_reqs != MAX_REQS || t.max_arts != MAX_ARTIFACTS {
        t.failures.push(format!(
            "size bound not reached: {} requirements, {} artifacts",
            t.max_reqs, t.max_arts
        ));
    }
    Verdict::from_failures(
        format!(
            "{} stores agree with the oracle: {exhaustive_cases} exhaustive (every link subset of {shapes_done} shapes of up to 3 requirements{}), {SEEDED_CASES} seeded up to {} requirements and {} artifacts; {} findings compared",
            t.cases,
            if skipped > 0 { format!(", {skipped} wider shapes seeded only") } else { String::new() },
            t.max_reqs,
            t.max_arts,
            t.findings
        ),
        t.failures,
    )
}
