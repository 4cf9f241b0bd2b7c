use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use ric_core::autodiff::Tape;
use ric_core::config::{Config, KEYS};
use ric_core::data::{generate_corpus, load_image, read_split, split_seed, write_split};
use ric_core::params::Binder;
use ric_core::render::{render_steps, StepView};
use ric_core::train::{evaluate, Example, Run, Trainer};

/// Short spellings for the most common overrides.
const ALIASES: &[(&str, &str)] = &[
    ("loss", "loss.kind"),
    ("beta", "loss.beta"),
    ("lambda", "loss.lambda"),
    ("ls_estimator", "loss.ls_estimator"),
];

fn cli() -> Command {
    let mut cmd = Command::new("ric")
        .about("Recurrent image captioner with a spatial transformer and Gaussian attention")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(Arg::new("json").long("json").global(true).action(ArgAction::SetTrue).help("Also print metrics as JSON lines"));
    for key in KEYS {
        let mut arg = Arg::new(*key).long(*key).value_name("VALUE").global(true).help(format!("Override config key {key}"));
        if *key == "seed" {
            arg = arg.help("Run seed");
        }
        cmd = cmd.arg(arg);
    }
    for (alias, key) in ALIASES {
        cmd = cmd.arg(Arg::new(*alias).long(*alias).value_name("VALUE").global(true).help(format!("Same as --{key}")));
    }
    let run = || Arg::new("run").long("run").value_name("DIR").required(true).help("Training output directory");
    let image = || Arg::new("image").long("image").value_name("PATH").required(true).help("Input image");
    cmd.subcommand(
        Command::new("gen-data")
            .about("Writes a synthetic shapes corpus")
            .arg(Arg::new("out").long("out").value_name("DIR").required(true))
            .arg(Arg::new("train").long("train").value_name("N").default_value("200").value_parser(clap::value_parser!(usize)))
            .arg(Arg::new("val").long("val").value_name("N").default_value("50").value_parser(clap::value_parser!(usize))),
    )
    .subcommand(
        Command::new("train")
            .about("Trains on DATA/train.tsv, validating on DATA/val.tsv when present")
            .arg(Arg::new("data").long("data").value_name("DIR").required(true))
            .arg(Arg::new("out").long("out").value_name("DIR").required(true))
            .arg(Arg::new("config").long("config").value_name("FILE").help("key=value config file"))
            .arg(Arg::new("resume").long("resume").action(ArgAction::SetTrue).help("Continue from OUT/model.ckpt")),
    )
    .subcommand(
        Command::new("eval")
            .about("Prints BLEU-1..4, perplexity and exact-match accuracy on a split")
            .arg(run())
            .arg(Arg::new("data").long("data").value_name("DIR").required(true))
            .arg(Arg::new("split").long("split").value_name("NAME").default_value("val")),
    )
    .subcommand(
        Command::new("caption")
            .about("Captions one image")
            .arg(run())
            .arg(image())
            .arg(Arg::new("greedy").long("greedy").action(ArgAction::SetTrue).help("Beam width 1")),
    )
    .subcommand(
        Command::new("render")
            .about("Writes per-step attention overlays and warped feature maps")
            .arg(run())
            .arg(image())
            .arg(Arg::new("out").long("out").value_name("DIR").required(true))
            .arg(Arg::new("scale").long("scale").value_name("K").default_value("8").value_parser(clap::value_parser!(usize))),
    )
}

/// Config overrides from flags, in `KEYS` order.
fn overrides(m: &ArgMatches) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for key in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            out.push((key.to_string(), v.clone()));
        }
    }
    for (alias, key) in ALIASES {
        if let Some(v) = m.get_one::<String>(alias) {
            out.push((key.to_string(), v.clone()));
        }
    }
    out
}

struct Printer {
    json: bool,
}

impl Printer {
    fn row(&self, fields: &[(&str, serde_json::Value)]) {
        let text: Vec<String> = fields
            .iter()
            .map(|(_, v)| match v {
                serde_json::Value::String(s) => s.clone(),
                serde_json::Value::Null => "nan".into(),
                other => other.to_string(),
            })
            .collect();
        println!("{}", text.join("\t"));
        if self.json {
            let obj: serde_json::Map<String, serde_json::Value> = fields.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
            println!("{}", serde_json::Value::Object(obj));
        }
    }
}

type AnyResult<T> = std::result::Result<T, Box<dyn std::error::Error>>;

fn gen_data(m: &ArgMatches, seed: u64) -> AnyResult<()> {
    let out = PathBuf::from(m.get_one::<String>("out").expect("required"));
    for (split, n) in [("train", *m.get_one::<usize>("train").expect("default")), ("val", *m.get_one::<usize>("val").expect("default"))] {
        if n == 0 {
            continue;
        }
        write_split(&out, split, &generate_corpus(n, split_seed(seed, split)))?;
        println!("{split}\t{n}\t{}", out.join(format!("{split}.tsv")).display());
    }
    Ok(())
}

fn train(m: &ArgMatches, sets: &[(String, String)], p: &Printer) -> AnyResult<()> {
    let mut config = Config::default();
    if let Some(file) = m.get_one::<String>("config") {
        config.apply_text(&std::fs::read_to_string(file)?)?;
    }
    for (k, v) in sets {
        config.set(k, v)?;
    }
    let data = Path::new(m.get_one::<String>("data").expect("required"));
    let out = Path::new(m.get_one::<String>("out").expect("required"));
    let train = read_split(data, "train")?;
    let val = if data.join("val.tsv").exists() { read_split(data, "val")? } else { Vec::new() };
    let mut trainer = if m.get_flag("resume") { Trainer::resume(config, &train, &val, out)? } else { Trainer::new(config, &train, &val)? };
    for rec in trainer.fit(Some(out))? {
        p.row(&[
            ("epoch", rec.epoch.into()),
            ("train_loss", rec.train_loss.into()),
            ("val_bleu4", rec.val_bleu4.into()),
            ("val_ppl", rec.val_ppl.into()),
        ]);
    }
    Ok(())
}

fn eval(m: &ArgMatches, sets: &[(String, String)], p: &Printer) -> AnyResult<()> {
    let run = Run::load(Path::new(m.get_one::<String>("run").expect("required")), sets)?;
    let split = m.get_one::<String>("split").expect("default");
    let items = read_split(Path::new(m.get_one::<String>("data").expect("required")), split)?;
    let examples = Example::from_items(&items, &run.vocab);
    let r = evaluate(&run.model, &run.store, &run.vocab, &examples, run.config.beam, run.config.max_len)?;
    let mut fields: Vec<(&str, serde_json::Value)> = vec![("split", split.as_str().into())];
    for (name, v) in ["bleu1", "bleu2", "bleu3", "bleu4"].into_iter().zip(r.bleu.scores) {
        fields.push((name, v.into()));
    }
    fields.push(("ppl", r.perplexity.into()));
    fields.push(("exact_match", r.exact_match.into()));
    p.row(&fields);
    Ok(())
}

fn caption(m: &ArgMatches, sets: &[(String, String)]) -> AnyResult<()> {
    let run = Run::load(Path::new(m.get_one::<String>("run").expect("required")), sets)?;
    let image = load_image(Path::new(m.get_one::<String>("image").expect("required")))?;
    let beam = if m.get_flag("greedy") { 1 } else { run.config.beam };
    let ids = run.model.caption(&run.store, &image, beam, run.config.max_len)?;
    println!("{}", run.vocab.decode(&ids).join(" "));
    Ok(())
}

fn render(m: &ArgMatches, sets: &[(String, String)]) -> AnyResult<()> {
    let run = Run::load(Path::new(m.get_one::<String>("run").expect("required")), sets)?;
    let image = load_image(Path::new(m.get_one::<String>("image").expect("required")))?;
    let tape = Tape::new();
    let b = Binder::frozen(&tape, &run.store);
    let inf = run.model.infer(&b, &image, run.config.beam, run.config.max_len)?;
    let steps: Vec<StepView> = inf
        .trace
        .iter()
        .map(|s| StepView { fx: s.filter.fx.value(), fy: s.filter.fy.value(), warped: s.warped.value() })
        .collect();
    let out = Path::new(m.get_one::<String>("out").expect("required"));
    let paths = render_steps(&image, &steps, out, *m.get_one::<usize>("scale").expect("default"))?;
    println!("{}", run.vocab.decode(&inf.tokens).join(" "));
    for p in paths {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let sets = overrides(&matches);
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let sub_sets = overrides(sub);
    let sets: Vec<_> = sets.into_iter().chain(sub_sets).collect();
    let printer = Printer { json: matches.get_flag("json") || sub.get_flag("json") };
    // Bad override values are usage errors, reported before any work.
    let mut probe = Config::default();
    for (k, v) in &sets {
        if let Err(e) = probe.set(k, v) {
            eprintln!("error: {e}\n\n{}", cli().render_usage());
            return ExitCode::from(2);
        }
    }
    let result = match name {
            "gen-data" => gen_data(sub, probe.seed),
            "train" => train(sub, &sets, &printer),
            "eval" => eval(sub, &sets, &printer),
            "caption" => caption(sub, &sets),
            "render" => render(sub, &sets),
            _ => unreachable!("clap rejects unknown subcommands"),
        } ;
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
