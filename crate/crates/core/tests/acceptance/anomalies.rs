use certiflow_core::scenario::ScenarioScript;

use crate::support::{run, Verdict};

const BASE: &str = "\
[scenario]
name = anomalies
repo = demo
author = erin
start = 2025-05-05T08:00:00Z
release = 0.1.0
config.requirement_globs = src/*.c

[ticket]
id = T-1
pbis = PBI-1

[ticket]
id = T-2
pbis = PBI-2

[pbi]
id = PBI-1
title = First
stage = SW_IMPLEMENTATION

[pbi]
id = PBI-2
title = Second
stage = SW_IMPLEMENTATION

[seed]
path = src/a.c
content <<END
/* @req{DEMO-LLR-1}
 * @kind{LLR}
 * @title{Add}
 * @text{add() shall return the sum.} */
/* @implements{DEMO-LLR-1} */
int add(int a, int b) { return a + b; }
END

[seed]
path = src/util.c
content <<END
int twice(int a) { return 2 * a; }
END

[seed]
path = tests/unit/test_a.c
content <<END
/* @verifies{DEMO-LLR-1} */
void test_add(void) {}
END

[pull-request]
commit = c1
branch = feature/T-1

[expect]
last-anomalies = none
";

fn seed(path: &str, content: &str) -> String {
    format!("\n[seed]\npath = {path}\ncontent <<END\n{content}\nEND\n")
}

fn pr(commit: &str, branch: &str) -> String {
    format!("\n[pull-request]\ncommit = {commit}\nbranch = {branch}\n")
}

/// The kind expected after the last pull request, the case name, and the
/// steps that follow the common base.
fn cases() -> Vec<(&'static str, &'static str, String)> {
    let complete = "\n[complete]\npbi = PBI-1\nSoftwareSpecificationHLR = src/util.c\n";
    let util2 = seed("src/util.c", "int twice(int a) { return a + a; }");
    vec![
        (
            "UNLINKED_CHANGE",
            "new traced file on a branch without a ticket",
            seed("src/extra.c", "int one(void) { return 1; }") + &pr("c2", "hotfix/quick"),
        ),
        (
            "none",
            "same file on a ticketed branch",
            seed("src/extra.c", "int one(void) { return 1; }") + &pr("c2", "feature/T-1"),
        ),
        (
            "BASELINED_CHANGED",
            "evidence of another PBI's DONE task modified",
            complete.to_string() + &util2 + &pr("c2", "feature/T-2"),
        ),
        (
            "none",
            "same change inside the owning PBI",
            complete.to_string() + &util2 + &pr("c2", "feature/T-1"),
        ),
        (
            "ORPHANED_LINK",
            "linked test deleted",
            "\n[delete]\npath = tests/unit/test_a.c\n".to_string() + &pr("c2", "feature/T-1"),
        ),
        (
            "none",
            "linked test modified",
            seed("tests/unit/test_a.c", "/* @verifies{DEMO-LLR-1} */\nvoid test_add(void) { }\nvoid more(void) {}")
                + &pr("c2", "feature/T-1"),
        ),
        (
            "REMOVED_TRACED_REQUIREMENT",
            "traced requirement's tag block removed",
            seed("src/a.c", "int add(int a, int b) { return a + b; }") + &pr("c2", "feature/T-1"),
        ),
        (
            "none",
            "traced requirement's text changed",
            seed(
                "src/a.c",
                "/* @req{DEMO-LLR-1}\n * @kind{LLR}\n * @title{Add}\n * @text{add() shall return a + b.} */\n\
                 /* @implements{DEMO-LLR-1} */\nint add(int a, int b) { return a + b; }",
            ) + &pr("c2", "feature/T-1"),
        ),
    ]
}

pub fn check() -> Verdict {
    let mut failures = Vec::new();
    let mut triggers = 0;
    let mut quiet = 0;
    for (want, name, steps) in cases() {
        let text = format!("{BASE}{steps}\n[expect]\nlast-anomalies = {want}\n");
        let script = match ScenarioScript::parse(&text) {
            Ok(s) => s,
            Err(e) => {
                failures.push(format!("{name}: script does not parse: {e}"));
                continue;
            }
        };
        let (_dir, report) = run(&script);
        let bad: Vec<String> = report
            .outcomes
            .iter()
            .filter(|o| !o.passed)
            .map(|o| o.to_string())
            .collect();
        if bad.is_empty() {
            if want == "none" {
                quiet += 1;
            } else {
                triggers += 1;
            }
        } else {
            failures.push(format!("{name} (want {want}): {}", bad.join("; ")));
        }
    }
    Verdict::from_failures(
        format!("{triggers} of 4 kinds raised exactly by their trigger, {quiet} of 4 siblings raised nothing"),
        failures,
    )
}
