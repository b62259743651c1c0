//! `fgl chat`: a line-based REPL against a trained checkpoint. The model
//! sees the whole conversation so far, joined by the utterance separator
//! and truncated to the context window, exactly as dialogue pairs are
//! framed for training. The transcript is saved as a dialogue corpus on
//! exit.

use std::io::{BufRead, Write};
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use fgl_core::decoding::generate;
use fgl_core::rng::{self, tag};
use fgl_core::tokenizer::Special;
use fgl_core::training::load_checkpoint;

use crate::config::{Overrides, RunConfig};
use crate::workspace::{LockGuard, Prepared};

pub const CHAT_DIR: &str = "chat";
pub const TRANSCRIPT_FILE: &str = "transcript.jsonl";

#[derive(Serialize)]
struct DialogueLine<'a> {
    utterances: &'a [String],
}

pub fn run(overrides: &Overrides, checkpoint: &Path) -> Result<()> {
    let cfg = RunConfig::resolve(overrides)?;
    let _lock = LockGuard::acquire(cfg.out_dir())?;
    let prepared = Prepared::load(cfg.out_dir())?;
    let ck = load_checkpoint(&crate::train::checkpoint_file(checkpoint))?;
    if ck.meta.vocab_checksum != prepared.vocab.checksum() {
        anyhow::bail!(
            "checkpoint {} was trained against a different vocabulary",
            checkpoint.display()
        );
    }
    let codec = prepared.codec();

    let mut settings = cfg.decoder_settings();
    let mut rng = rng::stream(settings.seed, &[tag::GENERATE]);
    let max_context = cfg.max_context_tokens();
    let separator = format!(" {} ", Special::Eou.literal());

    println!(
        "chatting with {} (k={}, seed={}); commands: :reset :seed N :k N :quit",
        checkpoint.display(),
        settings.k,
        settings.seed
    );

    let stdin = std::io::stdin();
    let mut history: Vec<String> = Vec::new();
    let mut dialogues: Vec<Vec<String>> = Vec::new();
    // Only exchanges with at least one reply can be reloaded as dialogues.
    let close = |history: &mut Vec<String>, dialogues: &mut Vec<Vec<String>>| {
        if history.len() >= 2 {
            dialogues.push(std::mem::take(history));
        } else {
            history.clear();
        }
    };

    loop {
        print!("you> ");
        std::io::stdout().flush().ok();
        let mut line = String::new();
        if stdin.lock().read_line(&mut line)? == 0 {
            println!();
            break; // EOF quits like :quit.
        }
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(command) = line.strip_prefix(':') {
            let mut words = command.split_whitespace();
            match (words.next(), words.next()) {
                (Some("quit"), _) => break,
                (Some("reset"), _) => {
                    close(&mut history, &mut dialogues);
                    println!("(context cleared)");
                }
                (Some("seed"), Some(n)) => match n.parse::<u64>() {
                    Ok(seed) => {
                        settings.seed = seed;
                        rng = rng::stream(seed, &[tag::GENERATE]);
                        println!("(sampling seed set to {seed})");
                    }
                    Err(_) => eprintln!("usage: :seed N"),
                },
                (Some("k"), Some(n)) => match n.parse::<usize>() {
                    Ok(k) if k >= 1 => {
                        settings.k = k;
                        println!("(top-k set to {k})");
                    }
                    _ => eprintln!("usage: :k N (N >= 1)"),
                },
                _ => eprintln!("unknown command {line:?}; try :reset :seed N :k N :quit"),
            }
            continue;
        }

        history.push(line.to_string());
        let mut context = codec.encode(&history.join(&separator));
        if context.len() > max_context {
            context.drain(..context.len() - max_context);
        }
        // A failed generation ends this turn, not the session.
        let reply = match generate(&ck.params, &ck.meta.config, &context, &settings, &mut rng) {
            Ok(ids) => match codec.decode(&ids) {
                Ok(text) => text,
                Err(e) => {
                    eprintln!("could not decode the reply: {e}");
                    continue;
                }
            },
            Err(e) => {
                eprintln!("generation failed: {e}");
                continue;
            }
        };
        println!("bot> {reply}");
        history.push(reply);
    }
    close(&mut history, &mut dialogues);

    if dialogues.is_empty() {
        println!("(no completed exchanges; nothing saved)");
        return Ok(());
    }
    let dir = cfg.out_dir().join(CHAT_DIR);
    std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut text = String::new();
    for utterances in &dialogues {
        text.push_str(&serde_json::to_string(&DialogueLine { utterances }).expect("serializes"));
        text.push('\n');
    }
    let path = dir.join(TRANSCRIPT_FILE);
    std::fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
    cfg.persist(&dir)?;
    println!("transcript saved to {}", path.display());
    Ok(())
}
