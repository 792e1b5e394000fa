use std::fs;

use mirror_core::loop_engine::{round_image_name, Engine, LoopError, Termination};

use crate::session::{runtime, usage, CliError, Session};
use crate::RunArgs;

pub fn cmd_run(args: RunArgs, s: &mut Session) -> Result<(), CliError> {
    if !args.image.is_file() {
        return Err(usage(format!("--image: no such file: {}", args.image.display())));
    }
    if args.question.trim().is_empty() {
        return Err(usage("--question is empty"));
    }
    let cfg = s.load_config(args.config.as_deref())?;
    let mut loop_cfg = cfg.loop_config();
    if let Some(n) = args.max_rounds {
        loop_cfg.max_rounds = n;
    }
    if let Some(o) = args.overlay {
        loop_cfg.overlay_mode = o.into();
    }
    let image = fs::read(&args.image).map_err(|e| usage(format!("--image: {e}")))?;
    s.input(&args.image);

    let backends = cfg.backends().map_err(|e| usage(format!("--config: {e}")))?;
    let engine = Engine::new(backends, loop_cfg, cfg.prompts.clone()).map_err(|e| usage(e.to_string()))?;
    let trajectory = engine.run_trajectory(&image, &args.question).map_err(|e| match e {
        LoopError::ImageDecode(_) => usage(format!("--image: {e}")),
        LoopError::EmptyQuestion => usage("--question is empty"),
        other => runtime(other.to_string()),
    })?;

    let out = s.out_dir()?.to_path_buf();
    let doc = trajectory.persist(&out).map_err(|e| runtime(e.to_string()))?;
    s.output(&out.join("trajectory.json"));
    for i in 0..doc.contexts.len() {
        s.output(&out.join(round_image_name(i)));
    }
    println!("termination: {}", doc.termination.as_str());
    println!("rounds: {}", doc.rounds);
    if let Some(answer) = &doc.final_answer {
        println!("answer: {answer}");
    }
    if doc.termination == Termination::BackendError {
        return Err(runtime(format!("backend error: {}", doc.error.unwrap_or_default())));
    }
    Ok(())
}
