#![allow(dead_code)]

use chrono::{DateTime, Utc};
use cweguard_core::dataset::Provenance;
use cweguard_core::{CweId, PairedExample, Snippet};

pub fn cwe(n: u32) -> CweId {
    CweId::new(n).unwrap()
}

pub fn provenance() -> Provenance {
    Provenance {
        backend: "fixture:test".into(),
        template_version: "default-000000000000".into(),
        generated_at: DateTime::<Utc>::from_timestamp(1_700_000_000, 0).unwrap(),
    }
}

/// A syntactically valid, distinct vulnerable/fixed pair; `i` makes it unique.
pub fn pair(cwe_number: u32, i: usize) -> PairedExample {
    let vulnerable = format!(
        "import subprocess\n\ndef run_{i}(arg):\n    return subprocess.run('tool ' + arg, shell=True)\n"
    );
    let fixed = format!(
        "import subprocess\n\ndef run_{i}(arg):\n    return subprocess.run(['tool', arg], shell=False)\n"
    );
    PairedExample::new(
        cwe(cwe_number),
        Snippet::new(vulnerable).unwrap(),
        Snippet::new(fixed).unwrap(),
        provenance(),
    )
    .unwrap()
}
