use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Conversation, Speaker, Turn};
use crate::error::{Error, IoContext, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireTurn {
    speaker: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class: Option<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireConversation {
    id: String,
    turns: Vec<WireTurn>,
}

fn parse_speaker(s: &str) -> Option<Speaker> {
    match s {
        "user" => Some(Speaker::User),
        "system" => Some(Speaker::System),
        _ => None,
    }
}

/// Reads one conversation per line: `{"id": .., "turns": [{"speaker":
/// "user"|"system", "text": ..}]}`. Blank lines are skipped.
pub fn load_jsonl(path: &Path) -> Result<Vec<Conversation>> {
    let file = File::open(path).at(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.at(path)?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let wire: WireConversation = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let mut turns = Vec::with_capacity(wire.turns.len());
        for t in wire.turns {
            let speaker = parse_speaker(&t.speaker).ok_or_else(|| parse_err(format!("unknown speaker {:?}", t.speaker)))?;
            turns.push(Turn { speaker, text: t.text.split_whitespace().map(str::to_string).collect(), class: t.class });
        }
        out.push(Conversation { id: wire.id, turns });
    }
    Ok(out)
}

pub fn save_jsonl(path: &Path, corpus: &[Conversation]) -> Result<()> {
    let file = File::create(path).at(path)?;
    let mut w = BufWriter::new(file);
    for c in corpus {
        let wire = WireConversation {
            id: c.id.clone(),
            turns: c
                .turns
                .iter()
                .map(|t| WireTurn {
                    speaker: match t.speaker {
                        Speaker::User => "user".into(),
                        Speaker::System => "system".into(),
                    },
                    text: t.text.join(" "),
                    class: t.class,
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &wire)?;
        w.write_all(b"\n").at(path)?;
    }
    w.flush().at(path)
}
