//! Stand-in external scorer: answers every request with a fixed score.
//!
//! Usage: `constant_scorer [SCORE] [--reverse] [--exit-after N CODE]`.
//! `--reverse` replies in reverse order; `--exit-after` quits with CODE once
//! N batches have been answered.

use std::io::{self, BufRead, Write};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut score = 0.5f64;
    let mut reverse = false;
    let mut exit_after: Option<(usize, i32)> = None;
    let mut i = 0;
    while i < args.len() {
        match args[i].as_str() {
            "--reverse" => reverse = true,
            "--exit-after" => {
                exit_after = Some((args[i + 1].parse().expect("batch count"), args[i + 2].parse().expect("exit code")));
                i += 2;
            }
            s => score = s.parse().expect("score"),
        }
        i += 1;
    }

    let stdin = io::stdin();
    let mut out = io::stdout().lock();
    let mut ids = Vec::new();
    let mut answered = 0;
    if exit_after.is_some_and(|(n, _)| n == 0) {
        std::process::exit(exit_after.unwrap().1);
    }
    for line in stdin.lock().lines() {
        let line = line.expect("stdin");
        if line.trim().is_empty() {
            if reverse {
                ids.reverse();
            }
            for id in ids.drain(..) {
                writeln!(out, "{{\"id\": {id}, \"score\": {score}}}").unwrap();
            }
            out.flush().unwrap();
            answered += 1;
            if let Some((n, code)) = exit_after {
                if answered >= n {
                    std::process::exit(code);
                }
            }
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(&line).expect("request json");
        ids.push(v["id"].as_u64().expect("id"));
    }
}
