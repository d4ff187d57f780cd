#![allow(dead_code)]

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use cweguard_core::backend::assemble_prompt;
use cweguard_core::backend::mock::{MockResponse, MockRule, MockScript};
use cweguard_core::dataset::{write_jsonl, Verdict};
use cweguard_core::synth::FixtureGenerationBackend;
use cweguard_core::{Catalog, CweId, LabeledInstance};
use serde_json::json;

pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

/// Runs the CLI in process with exactly `vars` as its environment.
pub async fn run(args: &[&str], vars: &HashMap<String, String>) -> Output {
    let mut stdout = Vec::new();
    let mut stderr = Vec::new();
    let argv = std::iter::once("cweguard").chain(args.iter().copied());
    let code = cweguard_cli::run(argv, vars, &mut stdout, &mut stderr).await;
    Output {
        code,
        stdout: String::from_utf8(stdout).unwrap(),
        stderr: String::from_utf8(stderr).unwrap(),
    }
}

pub fn vars(pairs: &[(&str, &str)]) -> HashMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

pub fn path_str(p: &Path) -> String {
    p.display().to_string()
}

/// Canned generator responses: `pairs` distinct, valid pairs per CWE.
pub fn write_generation_fixtures(dir: &Path, catalog: &Catalog, pairs: usize) {
    for id in catalog.ids() {
        let records: Vec<_> = (0..pairs)
            .map(|i| {
                let n = id.number();
                json!({
                    "vulnerable": format!(
                        "import subprocess\n\ndef task_{n}_{i}(arg):\n    return subprocess.run('tool ' + arg, shell=True)\n"
                    ),
                    "fixed": format!(
                        "import subprocess\n\ndef task_{n}_{i}(arg):\n    return subprocess.run(['tool', arg], shell=False)\n"
                    ),
                })
            })
            .collect();
        let path = FixtureGenerationBackend::response_path(dir, id, 1);
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, json!({ "pairs": records }).to_string()).unwrap();
    }
}

pub fn write_script(path: &Path, script: &MockScript) {
    std::fs::write(path, serde_json::to_string_pretty(script).unwrap()).unwrap();
}

/// A test set with `vulnerable` positives spread over the catalog, then
/// `secure` negatives. Inputs are distinct.
pub fn test_set(instruction: &str, catalog: &Catalog, vulnerable: usize, secure: usize) -> Vec<LabeledInstance> {
    let ids: Vec<CweId> = catalog.ids().collect();
    let mut out = Vec::new();
    for i in 0..vulnerable {
        let input = format!("import os\n\ndef handler_{i}(value):\n    os.system('run ' + value)\n");
        out.push(LabeledInstance::new(instruction, input, Verdict::Vulnerable(ids[i % ids.len()])));
    }
    for i in 0..secure {
        let input = format!("import subprocess\n\ndef worker_{i}(value):\n    subprocess.run(['run', value])\n");
        out.push(LabeledInstance::new(instruction, input, Verdict::Secure));
    }
    out
}

/// One exact-prompt rule per instance answering `answer(instance)`.
pub fn echo_script(instruction: &str, test: &[LabeledInstance], answer: impl Fn(usize, &LabeledInstance) -> String) -> MockScript {
    MockScript {
        rules: test
            .iter()
            .enumerate()
            .map(|(i, inst)| MockRule {
                prompt_contains: None,
                prompt_equals: Some(assemble_prompt(instruction, &inst.input).unwrap()),
                response: MockResponse::text(answer(i, inst)),
            })
            .collect(),
        default: MockResponse::text("Unparseable filler"),
        ..MockScript::default()
    }
}

pub fn write_test_set(path: &Path, test: &[LabeledInstance]) -> PathBuf {
    write_jsonl(path, test).unwrap();
    path.to_owned()
}
