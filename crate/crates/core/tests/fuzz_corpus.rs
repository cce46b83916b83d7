//! Replays the checked-in fuzz corpus through the same round-trip checks the
//! fuzz targets make, so the seeds stay meaningful on stable toolchains.

use std::fs;
use std::path::PathBuf;

use freespace::annotation::{parse_log, write_log};
use freespace::checkpoint;
use freespace::config::RunConfig;
use freespace::synth::manifest::Manifest;
use freespace::synth::pgm::Pgm;

fn corpus(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "empty corpus for {target}");
    out
}

fn text(bytes: &[u8]) -> Option<&str> {
    std::str::from_utf8(bytes).ok()
}

#[test]
fn pgm_seeds() {
    let mut ok = 0;
    for (_, bytes) in corpus("pgm") {
        if let Some(Ok(p)) = text(&bytes).map(Pgm::decode) {
            assert_eq!(Pgm::decode(&p.encode()).unwrap().encode(), p.encode());
            ok += 1;
        }
    }
    assert!(ok >= 2);
}

#[test]
fn manifest_seeds() {
    let mut ok = 0;
    for (_, bytes) in corpus("manifest") {
        if let Some(Ok(m)) = text(&bytes).map(Manifest::decode) {
            assert_eq!(Manifest::decode(&m.encode()).unwrap().encode(), m.encode());
            ok += 1;
        }
    }
    assert!(ok >= 1);
}

#[test]
fn telemetry_log_seeds() {
    let mut ok = 0;
    for (name, bytes) in corpus("telemetry_log") {
        match text(&bytes).map(parse_log) {
            Some(Ok(records)) => {
                let written = write_log(&records);
                assert_eq!(write_log(&parse_log(&written).unwrap()), written, "{name}");
                ok += 1;
            }
            Some(Err(e)) => assert!(e.to_string().contains("line"), "{name}: {e}"),
            None => {}
        }
    }
    assert!(ok >= 3);
}

#[test]
fn config_seeds() {
    let mut ok = 0;
    for (name, bytes) in corpus("config") {
        if let Some(Ok(cfg)) = text(&bytes).map(RunConfig::parse) {
            let ini = cfg.to_ini();
            assert_eq!(RunConfig::parse(&ini).unwrap().to_ini(), ini, "{name}");
            ok += 1;
        }
    }
    assert!(ok >= 2);
}

#[test]
fn checkpoint_seeds() {
    let mut ok = 0;
    for (name, bytes) in corpus("checkpoint") {
        if let Ok(params) = checkpoint::decode(&bytes) {
            assert_eq!(checkpoint::encode(&params), bytes, "{name}");
            ok += 1;
        }
    }
    assert_eq!(ok, 1);
}
