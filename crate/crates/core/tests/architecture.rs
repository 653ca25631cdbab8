//! Feature extraction and the shallow learners must stay usable without a
//! model service.

use std::fs;
use std::path::Path;

fn sources(dir: &Path, out: &mut Vec<(String, String)>) {
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            sources(&p, out);
        } else if p.extension().is_some_and(|x| x == "rs") {
            out.push((p.display().to_string(), fs::read_to_string(&p).unwrap()));
        }
    }
}

#[test]
fn features_and_shallow_never_touch_the_backend() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("src");
    let mut files = Vec::new();
    for m in ["features", "shallow"] {
        sources(&root.join(m), &mut files);
    }
    assert!(files.len() >= 2);
    for (path, text) in files {
        for forbidden in ["backend::", "crate::backend", "crate::signals", "crate::attack", "crate::pipeline", "ureq::"] {
            assert!(!text.contains(forbidden), "{path} references `{forbidden}`");
        }
    }
}
