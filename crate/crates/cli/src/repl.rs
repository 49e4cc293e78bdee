//! Interactive edit-and-probe session.
//!
//! Commands: `edit <subject> <relation> <new-object>`, `ask <prompt>`,
//! `undo`, `metrics`, `quit`.

use std::io::{BufRead, Write};

use microedit_core::editors::{apply_to_model, rollback, EditOutcome};
use microedit_core::evaluate;
use microedit_core::factworld::{build_request, EditRequest};
use microedit_core::microlm::BaseResponder;
use microedit_core::trainer::TrainRun;

use crate::{Args, CliResult};

pub fn cmd_repl(args: &Args) -> CliResult {
    let world = args.require_world()?;
    let mut model = args.require_ckpt()?;
    let method = match &args.method {
        Some(name) => microedit_core::editors::Method::parse(name)?,
        None => microedit_core::editors::Method::Rome,
    };
    let hp = args.hparams(method, &model.config)?;
    let gen_len = args.gen_len.unwrap_or(16);
    let seed = args.seed();

    let mut editor = microedit_core::editors::make_editor(method, &world)?;
    if editor.capabilities().needs_training {
        let mut run = TrainRun::classifier_default(seed);
        editor.prepare(&model, &world, &mut run)?;
    }
    let base = model.clone();
    let vocab = world.vocab();
    let mut undo_stack: Vec<(EditRequest, EditOutcome)> = Vec::new();

    println!("microedit repl — method {method}; edit / ask / undo / metrics / quit");
    let stdin = std::io::stdin();
    loop {
        print!("> ");
        std::io::stdout().flush().ok();
        let mut line = String::new();
        if stdin.lock().read_line(&mut line).map_err(microedit_core::Error::Io)? == 0 {
            break; // EOF
        }
        let line = line.trim();
        let (cmd, rest) = line.split_once(' ').unwrap_or((line, ""));
        match cmd {
            "" => {}
            "quit" | "exit" => break,
            "edit" => {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 3 {
                    println!("usage: edit <subject> <relation> <new-object>");
                    continue;
                }
                let lookup = (
                    world.entity_id(parts[0]),
                    world.relation_id(parts[1]),
                    world.entity_id(parts[2]),
                );
                let (Some(s), Some(r), Some(o)) = lookup else {
                    println!("unknown subject, relation, or object name");
                    continue;
                };
                match build_request(&world, s, r, o, seed).and_then(|req| {
                    apply_to_model(
                        editor.as_mut(),
                        &mut model,
                        std::slice::from_ref(&req),
                        &hp,
                        true,
                    )
                    .map(|outcome| (req, outcome))
                }) {
                    Ok((req, outcome)) => {
                        println!(
                            "edited: {} now answers `{}` ({}s)",
                            vocab.decode(&req.edit_prompt),
                            vocab.decode(&req.target),
                            format_args!("{:.2}", outcome.elapsed_seconds),
                        );
                        undo_stack.push((req, outcome));
                    }
                    Err(e) => println!("error:{}: {e}", e.category()),
                }
            }
            "ask" => {
                let prompt = rest.trim().trim_matches('"');
                match vocab.encode(prompt) {
                    Ok(tokens) => {
                        let responder = editor.responder(&model);
                        match responder.answer(&tokens) {
                            Ok(answer) => println!("{}", vocab.decode(&answer)),
                            Err(e) => println!("error:{}: {e}", e.category()),
                        }
                    }
                    Err(e) => println!("error:{}: {e}", e.category()),
                }
            }
            "undo" => match undo_stack.pop() {
                Some((_, mut outcome)) => {
                    match rollback(editor.as_mut(), &mut model, &mut outcome) {
                        Ok(()) => println!("rolled back"),
                        Err(e) => println!("error:{}: {e}", e.category()),
                    }
                }
                None => println!("nothing to undo"),
            },
            "metrics" => match undo_stack.last() {
                Some((req, outcome)) => {
                    let pre = BaseResponder(&base);
                    let post = editor.responder(&model);
                    let fmt = |v: Result<f64, microedit_core::Error>| match v {
                        Ok(x) => format!("{:.2}", 100.0 * x),
                        Err(_) => "n/a".into(),
                    };
                    // Token overlap is supplementary; accuracy is exact match.
                    let overlap = post
                        .answer(&req.edit_prompt)
                        .map(|a| microedit_core::trainer::token_overlap(&a, &req.target))
                        .unwrap_or(0.0);
                    println!(
                        "reliability {}  generalization {}  locality {}  portability {}  (answer token overlap {:.2})",
                        fmt(evaluate::reliability(post.as_ref(), req)),
                        fmt(evaluate::generalization(post.as_ref(), req)),
                        fmt(evaluate::locality(&pre, post.as_ref(), req)),
                        fmt(evaluate::portability(post.as_ref(), req)),
                        overlap,
                    );
                    match evaluate::fluency(post.as_ref(), req, gen_len.max(3)) {
                        Ok((bits, _)) => println!(
                            "fluency {bits:.2} bits  time {:.2}s  extra {} bytes",
                            outcome.elapsed_seconds, outcome.extra_state_bytes
                        ),
                        Err(e) => println!("fluency n/a ({e})"),
                    }
                }
                None => println!("no edits yet"),
            },
            other => println!("unknown command `{other}` (edit / ask / undo / metrics / quit)"),
        }
    }
    Ok(())
}
