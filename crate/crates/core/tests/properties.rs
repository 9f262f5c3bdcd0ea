use std::collections::BTreeSet;

use certiflow_core::canonical::{Provenance, Timestamp};
use certiflow_core::req_store::{RequirementStatus, StoreId};
use certiflow_core::scenario::{generate_fixture, FixtureProfile, ScenarioScript};
use certiflow_core::tag_parser::{
    normalize_title, scan_source, LineSpan, RequirementDraft, RequirementKind,
};
use certiflow_core::trace::{
    build_matrix, detect_anomalies, render_matrix_csv, AnomalyInputs, ArtifactKind, ArtifactRecord,
    ChangeSet, ChangeType, EntityRef, FileChange, LinkKind, LinkSet, TraceLink,
};
use certiflow_core::workflow::{
    advance, required_tasks, ChecklistVerdict, EvidenceInfo, EvidenceResolver, Pbi, Stage, TaskId,
    TaskState,
};
use certiflow_core::workspace::Project;
use proptest::prelude::*;

fn prov() -> Provenance {
    let at: Timestamp = "2025-04-01T12:00:00Z".parse().unwrap();
    Provenance::new("prop", at).unwrap()
}

fn kind() -> impl Strategy<Value = RequirementKind> {
    prop::sample::select(RequirementKind::ALL.to_vec())
}

fn draft() -> impl Strategy<Value = RequirementDraft> {
    let line = "[a-zA-Z0-9 {}\\\\*/@#%,.é-]{0,24}";
    (
        kind(),
        1u32..5000,
        "[a-zA-Z0-9 {}\\\\*/@,.ü-]{1,30}",
        prop::collection::vec(line, 1..5),
        prop::collection::btree_set(1u32..50, 0..3),
    )
        .prop_filter_map("blank title or text", |(kind, n, title, lines, parents)| {
            let title = normalize_title(&title);
            let text = lines
                .iter()
                .map(|l| l.trim())
                .collect::<Vec<_>>()
                .join("\n")
                .trim()
                .to_string();
            if title.is_empty() || text.is_empty() {
                return None;
            }
            let parent_keys = match kind.parent_kind() {
                Some(pk) => parents
                    .iter()
                    .map(|p| format!("P-{}-{p}", pk.id_prefix()))
                    .collect(),
                None => vec![],
            };
            Some(RequirementDraft {
                local_key: format!("GEN-{}-{n}", kind.id_prefix()),
                kind,
                title,
                text,
                parent_keys,
                source_path: "src/gen.c".into(),
                line_span: LineSpan { start: 1, end: 1 },
            })
        })
}

proptest! {
    #[test]
    fn tag_blocks_scan_back(d in draft(), lead in 0usize..4) {
        let file = format!("{}{}int x;\n", "// filler\n".repeat(lead), d.to_tag_block());
        let back = scan_source(&file, &d.source_path).unwrap();
        prop_assert_eq!(back.len(), 1);
        let b = &back[0];
        prop_assert_eq!(&b.local_key, &d.local_key);
        prop_assert_eq!(b.kind, d.kind);
        prop_assert_eq!(&b.title, &d.title);
        prop_assert_eq!(&b.text, &d.text);
        prop_assert_eq!(&b.parent_keys, &d.parent_keys);
        prop_assert_eq!(b.line_span.start as usize, lead + 2);
    }

    #[test]
    fn fixtures_are_deterministic_and_render_faithfully(s in 0usize..3, h in 1usize..4, l in 1usize..6, seed in any::<u64>()) {
        let a = generate_fixture(FixtureProfile::new(s, h, l), seed);
        let b = generate_fixture(FixtureProfile::new(s, h, l), seed);
        prop_assert_eq!(&a, &b);
        let mut reparsed = ScenarioScript::parse(&a.render()).unwrap();
        for step in &mut reparsed.steps {
            step.line = 0;
        }
        let mut original = a.clone();
        for step in &mut original.steps {
            step.line = 0;
        }
        prop_assert_eq!(reparsed, original);
    }
}

// ---------------------------------------------------------------------------
// A small fixed project for the matrix and anomaly properties

struct World {
    project: Project,
    llr: StoreId,
    hlr: StoreId,
    links: Vec<TraceLink>,
}

fn world() -> World {
    let p = prov();
    let mut project = Project::new();
    project
        .create_pbi(
            "PBI-1",
            "One",
            Stage::SwImplementation,
            "1.0",
            "S1",
            vec![],
            &p,
        )
        .unwrap();
    let reg = |project: &mut Project, kind: ArtifactKind, path: &str| {
        let rec = ArtifactRecord::new(
            kind,
            path,
            "c1",
            &format!("h-{path}"),
            kind.default_stage(),
            vec!["PBI-1".into()],
            &p,
        );
        project.register(rec).unwrap()
    };
    let src_a = reg(&mut project, ArtifactKind::Source, "src/a.c");
    let src_b = reg(&mut project, ArtifactKind::Source, "src/b.c");
    let unit = reg(&mut project, ArtifactKind::UnitTest, "tests/unit/t.c");
    let integ = reg(
        &mut project,
        ArtifactKind::IntegrationTest,
        "tests/integration/i.c",
    );
    let report = reg(
        &mut project,
        ArtifactKind::TestReport,
        "tests/reports/r.txt",
    );
    let design = reg(&mut project, ArtifactKind::DesignDoc, "docs/design/d.md");
    let review = reg(
        &mut project,
        ArtifactKind::ReviewChecklist,
        "docs/reviews/c.md",
    );

    let drafts = [
        ("GEN-HLR-1", RequirementKind::Hlr, vec![]),
        (
            "GEN-LLR-1",
            RequirementKind::Llr,
            vec!["GEN-HLR-1".to_string()],
        ),
        (
            "GEN-LLR-2",
            RequirementKind::Llr,
            vec!["GEN-HLR-1".to_string()],
        ),
    ]
    .map(|(key, kind, parent_keys)| RequirementDraft {
        local_key: key.into(),
        kind,
        title: key.into(),
        text: "Some text, with \"quotes\".".into(),
        parent_keys,
        source_path: "docs/spec/s.req".into(),
        line_span: LineSpan { start: 1, end: 2 },
    });
    let out = project.import(&drafts, &p).unwrap();
    let (hlr, llr, llr2) = (
        out.mapping["GEN-HLR-1"],
        out.mapping["GEN-LLR-1"],
        out.mapping["GEN-LLR-2"],
    );
    project
        .set_status(&llr, RequirementStatus::Reviewed, &review, &p)
        .unwrap();
    project
        .set_status(&llr, RequirementStatus::Baselined, &review, &p)
        .unwrap();

    let r = EntityRef::Requirement;
    let a = |id: &String| EntityRef::Artifact(id.clone());
    let links: Vec<TraceLink> = [
        (r(llr), a(&src_a), LinkKind::Implements),
        (r(llr2), a(&src_b), LinkKind::Implements),
        (r(hlr), a(&design), LinkKind::Implements),
        (r(llr), a(&design), LinkKind::Implements),
        (a(&unit), r(llr), LinkKind::Verifies),
        (a(&integ), r(hlr), LinkKind::Verifies),
        (a(&integ), r(llr2), LinkKind::Verifies),
        (a(&report), a(&unit), LinkKind::Reports),
        (a(&review), r(llr), LinkKind::Reviews),
        (r(hlr), r(llr2), LinkKind::Derives),
    ]
    .into_iter()
    .map(|(from, to, kind)| TraceLink::new(from, to, kind, "c1", &p))
    .collect();
    for l in &links {
        project.link(l.clone()).unwrap();
    }
    project
        .advance(
            "PBI-1",
            TaskId::SoftwareSpecificationHLR,
            TaskState::InProgress,
            vec![],
            &p,
        )
        .unwrap();
    project
        .advance(
            "PBI-1",
            TaskId::SoftwareSpecificationHLR,
            TaskState::Done,
            vec![src_b],
            &p,
        )
        .unwrap();
    World {
        project,
        llr,
        hlr,
        links,
    }
}

fn change_pool() -> Vec<FileChange> {
    let c = |path: &str, change_type, new_hash: &str| FileChange {
        path: path.into(),
        change_type,
        new_hash: new_hash.into(),
    };
    vec![
        c("src/a.c", ChangeType::Modified, "new"),
        c("src/a.c", ChangeType::Modified, "h-src/a.c"),
        c("src/b.c", ChangeType::Modified, "new"),
        c("src/b.c", ChangeType::Deleted, ""),
        c("tests/unit/t.c", ChangeType::Deleted, ""),
        c("tests/integration/i.c", ChangeType::Modified, "new"),
        c("docs/design/d.md", ChangeType::Deleted, ""),
        c("docs/reviews/c.md", ChangeType::Modified, "new"),
        c("src/new.c", ChangeType::Added, "new"),
        c("notes/x.txt", ChangeType::Added, "new"),
        c("../escape", ChangeType::Added, "new"),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matrix_csv_ignores_link_insertion_order(order in Just((0..10).collect::<Vec<usize>>()).prop_shuffle()) {
        let w = world();
        let p = w.project;
        let mut shuffled = LinkSet::new();
        for &i in &order {
            shuffled.add_link(w.links[i].clone(), &p.store, &p.index).unwrap();
        }
        let at = prov().at;
        let a = render_matrix_csv(&build_matrix(&p.store, &p.index, &p.links, at).unwrap());
        let b = render_matrix_csv(&build_matrix(&p.store, &p.index, &shuffled, at).unwrap());
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.lines().count(), 4);
    }

    #[test]
    fn more_changes_never_hide_an_anomaly(
        picks in prop::collection::vec((any::<bool>(), any::<bool>()), 11),
        removed in (any::<bool>(), any::<bool>()),
        in_context in any::<bool>(),
    ) {
        let w = world();
        let pool = change_pool();
        let prefixes = vec!["src/".to_string(), "tests/".to_string(), "docs/".to_string()];
        let inputs = AnomalyInputs {
            store: &w.project.store,
            index: &w.project.index,
            links: &w.project.links,
            board: &w.project.board,
            traced_prefixes: &prefixes,
        };
        // `small` takes the first flag, `large` takes either
        let mut small = ChangeSet::default();
        let mut large = ChangeSet::default();
        for (c, (s, l)) in pool.iter().zip(&picks) {
            if *s {
                small.files.push(c.clone());
            }
            if *s || *l {
                large.files.push(c.clone());
            }
        }
        if removed.0 {
            small.removed_requirements.push(w.llr);
            large.removed_requirements.push(w.llr);
        }
        if removed.1 {
            large.removed_requirements.push(w.hlr);
        }
        let context: Vec<String> = if in_context { vec!["PBI-1".into()] } else { vec![] };
        let at = prov().at;
        let ids = |cs: &ChangeSet| -> BTreeSet<String> {
            detect_anomalies(&inputs, cs, "c2", &context, at).into_iter().map(|a| a.anomaly_id).collect()
        };
        let (a, b) = (ids(&small), ids(&large));
        prop_assert!(a.is_subset(&b), "lost {:?}", a.difference(&b).collect::<Vec<_>>());
    }
}

// ---------------------------------------------------------------------------
// Workflow reachable states

struct AnyEvidence;

impl EvidenceResolver for AnyEvidence {
    fn resolve(&self, id: &str) -> Option<EvidenceInfo> {
        let checklist = id
            .starts_with("review")
            .then_some(ChecklistVerdict::Acceptable);
        Some(EvidenceInfo {
            kind: ArtifactKind::Source,
            checklist,
        })
    }
}

proptest! {
    #[test]
    fn done_tasks_stay_a_prefix(
        stage in prop::sample::select(Stage::ALL.to_vec()),
        moves in prop::collection::vec((0usize..18, any::<bool>(), any::<bool>()), 0..120),
    ) {
        let p = prov();
        let tasks = required_tasks(stage);
        let mut pbi = Pbi::new("PBI-9", "walk", stage, "1.0", "S1", vec![StoreId::new(RequirementKind::Hlr, 1)], &p).unwrap();
        for (i, done, with_review) in moves {
            let task = tasks[i % tasks.len()];
            let to = if done { TaskState::Done } else { TaskState::InProgress };
            let ev = vec![if with_review { "review-1".to_string() } else { "src-1".to_string() }];
            if let Ok(next) = advance(&pbi, task, to, &ev, &p, &AnyEvidence) {
                pbi = next;
            }
            let states: Vec<TaskState> = pbi.tasks.iter().map(|t| t.state).collect();
            let done_prefix = states.iter().take_while(|s| **s == TaskState::Done).count();
            prop_assert!(states[done_prefix..].iter().all(|s| *s != TaskState::Done), "{:?}", states);
            prop_assert!(states.iter().filter(|s| **s == TaskState::InProgress).count() <= 1);
            for t in pbi.done_tasks() {
                prop_assert!(!t.evidence.is_empty());
            }
        }
    }
}

#[test]
fn the_change_pool_reaches_every_anomaly_kind() {
    let w = world();
    let prefixes = vec![
        "src/".to_string(),
        "tests/".to_string(),
        "docs/".to_string(),
    ];
    let inputs = AnomalyInputs {
        store: &w.project.store,
        index: &w.project.index,
        links: &w.project.links,
        board: &w.project.board,
        traced_prefixes: &prefixes,
    };
    let all = ChangeSet {
        files: change_pool(),
        removed_requirements: vec![w.llr],
        reset_requirements: vec![],
    };
    let kinds: BTreeSet<&str> = detect_anomalies(&inputs, &all, "c2", &[], prov().at)
        .iter()
        .map(|a| a.kind.as_str())
        .collect();
    assert_eq!(kinds.len(), 4, "{kinds:?}");
}
