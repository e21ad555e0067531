use std::fs;
use std::path::PathBuf;

use nnslicer::apps::{
    detect_batch, fgsm, fine_tune, load_detector, pgd, prune, save_detector, select_protected, simulate_extraction,
    train_detector, CartConfig, ExtractionConfig, PruneConfig, SelectionMode, Verdict,
};
use nnslicer::dataset::{input_digest, load_dataset, save_dataset, Dataset, Sample};
use nnslicer::engine::{evaluate, sgd_train_masked, Engine, TrainConfig, TrainMask};
use nnslicer::model::{lenet, load_model, save_model, ModelGraph};
use nnslicer::parallel::Workers;
use nnslicer::profile::{load_profile, profile, save_profile};
use nnslicer::slicer::{aggregate, backward_slice, oracle_backward, output_neurons, save_slice, ContributionTable, Slicer};
use nnslicer::tensor::Tensor;
use nnslicer::testkit::slice_case;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{
    check_exists, check_theta, check_unit, existing, invalid, need, parse_amount, parse_classes, resolve, Failure,
    Outcome,
};
use crate::report::{hex, metric, metrics, table};
use crate::{
    AttackArgs, Command, DetectCommand, DetectEvalArgs, DetectTrainArgs, EvalArgs, OracleArgs, ProfileArgs, ProtectArgs,
    PruneArgs, SliceArgs, TrainArgs,
};

pub fn run(command: Command) -> Outcome {
    match command {
        Command::Train(a) => {
            let config = a.common.config.clone();
            train(resolve(a, config.as_deref())?)
        }
        Command::Profile(a) => {
            let config = a.common.config.clone();
            profile_cmd(resolve(a, config.as_deref())?)
        }
        Command::Slice(a) => {
            let config = a.common.config.clone();
            slice(resolve(a, config.as_deref())?)
        }
        Command::Detect(DetectCommand::Train(a)) => {
            let config = a.common.config.clone();
            detect_train(resolve(a, config.as_deref())?)
        }
        Command::Detect(DetectCommand::Eval(a)) => {
            let config = a.common.config.clone();
            detect_eval(resolve(a, config.as_deref())?)
        }
        Command::Attack(a) => {
            let config = a.common.config.clone();
            attack(resolve(a, config.as_deref())?)
        }
        Command::Prune(a) => {
            let config = a.common.config.clone();
            prune_cmd(resolve(a, config.as_deref())?)
        }
        Command::Protect(a) => {
            let config = a.common.config.clone();
            protect(resolve(a, config.as_deref())?)
        }
        Command::Eval(a) => {
            let config = a.common.config.clone();
            eval(resolve(a, config.as_deref())?)
        }
        Command::OracleCheck(a) => {
            let config = a.common.config.clone();
            oracle_check(resolve(a, config.as_deref())?)
        }
    }
}

fn model_arg(path: &Option<PathBuf>) -> Outcome<ModelGraph> {
    Ok(load_model(existing(path, "--model")?)?)
}

fn data_arg(path: &Option<PathBuf>, flag: &str, model: &ModelGraph) -> Outcome<Dataset> {
    let data = load_dataset(existing(path, flag)?, model.class_count)?;
    data.check_shape(&model.input_shape)?;
    Ok(data)
}

fn slicer_arg(path: &Option<PathBuf>, model: &ModelGraph) -> Outcome<Slicer> {
    let p = load_profile(existing(path, "--profile")?)?;
    Ok(Slicer::new(model, &p)?)
}

fn mode_arg(mode: &Option<String>, seed: u64) -> Outcome<SelectionMode> {
    match mode.as_deref().unwrap_or("contrib") {
        "contrib" => Ok(SelectionMode::Contrib),
        "weight" => Ok(SelectionMode::Weight),
        "random" => Ok(SelectionMode::Random { seed }),
        other => invalid(format!("--mode must be contrib, weight or random, got {other:?}")),
    }
}

fn mode_name(mode: SelectionMode) -> &'static str {
    match mode {
        SelectionMode::Contrib => "contrib",
        SelectionMode::Weight => "weight",
        SelectionMode::Random { .. } => "random",
    }
}

fn inputs(data: &Dataset) -> Vec<&Tensor> {
    data.samples.iter().map(|s| &s.input).collect()
}

/// Aggregate contribution table of the target-class samples.
fn target_table(slicer: &Slicer, data: &Dataset, targets: &[usize], theta: f32, workers: &Workers) -> Outcome<ContributionTable> {
    let subset = data.restrict(targets);
    if subset.is_empty() {
        return invalid(format!("--data holds no samples of classes {targets:?}"));
    }
    Ok(slicer.slice_aggregate(&inputs(&subset), &output_neurons(slicer.model(), targets), theta, workers)?)
}

fn train(a: TrainArgs) -> Outcome {
    let seed = a.common.seed();
    let start = match &a.model {
        Some(_) => model_arg(&a.model)?,
        None => {
            let classes = a.classes.unwrap_or(10);
            if classes < 2 {
                return invalid("--classes must be at least 2");
            }
            lenet(classes, seed)
        }
    };
    let data = data_arg(&a.data, "--data", &start)?;
    let cfg = TrainConfig {
        learning_rate: a.lr.unwrap_or(0.05),
        batch_size: a.batch_size.unwrap_or(32),
        epochs: a.epochs.unwrap_or(5),
        seed,
    };
    cfg.validate()?;
    let workers = a.common.workers()?;
    let dir = a.common.out_dir()?;
    let outcome = sgd_train_masked(&start, &data, &cfg, &TrainMask::all(&start))?;
    save_model(&outcome.model, dir.join("model.nnsm"))?;
    let accuracy = evaluate(&outcome.model, &data, None, &workers)?;

    #[derive(Serialize)]
    struct Loss {
        epoch: usize,
        loss: f64,
    }
    let losses: Vec<Loss> = outcome.epoch_losses.iter().enumerate().map(|(i, &loss)| Loss { epoch: i + 1, loss }).collect();
    table(&dir, "train_loss", &["epoch", "loss"], &losses)?;
    metrics(
        &dir,
        "train",
        &[
            metric("samples", data.len()),
            metric("epochs", cfg.epochs),
            metric("learning_rate", cfg.learning_rate),
            metric("batch_size", cfg.batch_size),
            metric("final_loss", outcome.epoch_losses.last().copied().unwrap_or(f64::NAN)),
            metric("train_accuracy", accuracy),
        ],
    )?;
    println!("trained on {} samples, train accuracy {accuracy:.4}", data.len());
    Ok(())
}

fn profile_cmd(a: ProfileArgs) -> Outcome {
    let model = model_arg(&a.model)?;
    let data = data_arg(&a.data, "--data", &model)?;
    let workers = a.common.workers()?;
    let dir = a.common.out_dir()?;
    let p = profile(&model, &data, &workers)?;
    save_profile(&p, dir.join("profile.nnsp"))?;
    metrics(
        &dir,
        "profile",
        &[
            metric("samples", p.sample_count),
            metric("neurons", p.neuron_count()),
            metric("model_fingerprint", hex(&p.model)),
            metric("dataset_hash", hex(&p.dataset)),
        ],
    )?;
    println!("profiled {} neurons over {} samples", p.neuron_count(), p.sample_count);
    Ok(())
}

fn slice(a: SliceArgs) -> Outcome {
    let model = model_arg(&a.model)?;
    let slicer = slicer_arg(&a.profile, &model)?;
    let data = data_arg(&a.data, "--data", &model)?;
    let targets = parse_classes(&need(&a.outputs, "--outputs")?, model.class_count)?;
    let theta = check_theta(a.theta.unwrap_or(0.0))?;
    if data.is_empty() {
        return invalid("--data is empty");
    }
    let workers = a.common.workers()?;
    let dir = a.common.out_dir()?;
    let tables = slicer.slice_batch(&inputs(&data), &output_neurons(&model, &targets), theta, &workers)?;
    let per_sample = dir.join("slices");
    fs::create_dir_all(&per_sample)?;
    for (i, t) in tables.iter().enumerate() {
        save_slice(t, per_sample.join(format!("sample_{i:05}.nnsl")))?;
    }
    let total = aggregate(&tables)?;
    save_slice(&total, dir.join("aggregate.nnsl"))?;

    #[derive(Serialize)]
    struct Row {
        sample: usize,
        label: usize,
        predicted: usize,
        neurons: usize,
        synapses: usize,
    }
    let engine = slicer.engine();
    let rows = data
        .samples
        .iter()
        .zip(&tables)
        .enumerate()
        .map(|(i, (s, t))| {
            Ok(Row {
                sample: i,
                label: s.label,
                predicted: engine.predict(&s.input)?,
                neurons: t.neurons.len(),
                synapses: t.synapses.len(),
            })
        })
        .collect::<Outcome<Vec<_>>>()?;
    table(&dir, "slice_samples", &["sample", "label", "predicted", "neurons", "synapses"], &rows)?;
    let mean = rows.iter().map(|r| r.synapses as f64).sum::<f64>() / rows.len() as f64;
    metrics(
        &dir,
        "slice",
        &[
            metric("samples", total.sample_count),
            metric("theta", theta),
            metric("outputs", targets.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";")),
            metric("aggregate_neurons", total.neurons.len()),
            metric("aggregate_synapses", total.synapses.len()),
            metric("mean_synapses_per_sample", mean),
        ],
    )?;
    println!(
        "sliced {} samples: aggregate slice has {} neurons and {} synapses",
        tables.len(),
        total.neurons.len(),
        total.synapses.len()
    );
    Ok(())
}

fn detect_train(a: DetectTrainArgs) -> Outcome {
    let model = model_arg(&a.model)?;
    let slicer = slicer_arg(&a.profile, &model)?;
    let data = data_arg(&a.data, "--data", &model)?;
    let theta = check_theta(a.theta.unwrap_or(0.5))?;
    let defaults = CartConfig::default();
    let cart = CartConfig {
        max_depth: a.max_depth.unwrap_or(defaults.max_depth),
        min_leaf: a.min_leaf.unwrap_or(defaults.min_leaf),
    };
    let workers = a.common.workers()?;
    let dir = a.common.out_dir()?;
    let trained = train_detector(&slicer, &data, theta, &cart, &workers)?;
    save_detector(&trained.detector, dir.join("detector.nnsd"))?;
    let tree = &trained.detector.tree;
    metrics(
        &dir,
        "detect_train",
        &[
            metric("samples", data.len()),
            metric("theta", theta),
            metric("agreement", trained.agreement),
            metric("tree_depth", tree.depth()),
            metric("tree_nodes", tree.nodes.len()),
        ],
    )?;
    println!("detector fitted on {} samples, agreement {:.4}", data.len(), trained.agreement);
    Ok(())
}

fn detect_eval(a: DetectEvalArgs) -> Outcome {
    let model = model_arg(&a.model)?;
    let slicer = slicer_arg(&a.profile, &model)?;
    let detector = load_detector(existing(&a.detector, "--detector")?)?;
    let normal = data_arg(&a.data, "--data", &model)?;
    for p in &a.adversarial {
        check_exists(p, "--adversarial")?;
    }
    let workers = a.common.workers()?;
    let dir = a.common.out_dir()?;

    #[derive(Serialize)]
    struct Verdicts {
        set: String,
        sample: usize,
        label: usize,
        predicted: usize,
        tree_label: usize,
        verdict: &'static str,
    }
    #[derive(Serialize)]
    struct Score {
        attack: String,
        positives: usize,
        caught: usize,
        negatives: usize,
        false_alarms: usize,
        precision: f64,
        recall: f64,
        f1: f64,
    }
    let name = |v: Verdict| match v {
        Verdict::Normal => "normal",
        Verdict::Adversarial => "adversarial",
    };
    let mut verdicts = Vec::new();
    let clean = detect_batch(&detector, &slicer, &inputs(&normal), &workers)?;
    let false_alarms = clean.iter().filter(|d| d.verdict == Verdict::Adversarial).count();
    for (i, (s, d)) in normal.samples.iter().zip(&clean).enumerate() {
        verdicts.push(Verdicts {
            set: "normal".into(),
            sample: i,
            label: s.label,
            predicted: d.predicted,
            tree_label: d.tree_label,
            verdict: name(d.verdict),
        });
    }
    let mut scores = Vec::new();
    for path in &a.adversarial {
        let set = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        let adv = load_dataset(path, model.class_count)?;
        adv.check_shape(&model.input_shape)?;
        let found = detect_batch(&detector, &slicer, &inputs(&adv), &workers)?;
        let mut positives = 0;
        let mut caught = 0;
        for (i, (s, d)) in adv.samples.iter().zip(&found).enumerate() {
            if d.predicted != s.label {
                positives += 1;
                caught += usize::from(d.verdict == Verdict::Adversarial);
            }
            verdicts.push(Verdicts {
                set: set.clone(),
                sample: i,
                label: s.label,
                predicted: d.predicted,
                tree_label: d.tree_label,
                verdict: name(d.verdict),
            });
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(caught, caught + false_alarms);
        let recall = ratio(caught, positives);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        println!("{set}: recall {recall:.3}, precision {precision:.3} over {positives} successful attacks");
        scores.push(Score {
            attack: set,
            positives,
            caught,
            negatives: normal.len(),
            false_alarms,
            precision,
            recall,
            f1,
        });
    }
    table(
        &dir,
        "detect_eval",
        &["attack", "positives", "caught", "negatives", "false_alarms", "precision", "recall", "f1"],
        &scores,
    )?;
    table(&dir, "detect_verdicts", &["set", "sample", "label", "predicted", "tree_label", "verdict"], &verdicts)?;
    println!("{false_alarms} of {} normal samples flagged", normal.len());
    Ok(())
}

fn attack(a: AttackArgs) -> Outcome {
    let model = model_arg(&a.model)?;
    let data = data_arg(&a.data, "--data", &model)?;
    let eps = parse_amount(&need(&a.eps, "--eps")?, "--eps")?;
    let method = a.method.clone().unwrap_or_else(|| "fgsm".into());
    let alpha = match &a.alpha {
        Some(text) => parse_amount(text, "--alpha")?,
        None => eps / 4.0,
    };
    let iters = a.iters.unwrap_or(10);
    let seed = a.common.seed();
    if method != "fgsm" && method != "pgd" {
        return invalid(format!("--method must be fgsm or pgd, got {method:?}"));
    }
    let workers = a.common.workers()?;
    let dir = a.common.out_dir()?;
    let engine = Engine::new(&model)?;
    let perturbed = workers.try_map(&data.samples, |s| {
        let adv = if method == "fgsm" {
            fgsm(&engine, &s.input, s.label, eps)?
        } else {
            let digest = input_digest(&s.input);
            let start = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
            pgd(&engine, &s.input, s.label, eps, alpha, iters, seed ^ start)?
        };
        let before = engine.predict(&s.input)?;
        let after = engine.predict(&adv)?;
        let linf = adv.data().iter().zip(s.input.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        Ok((Sample { input: adv, label: s.label }, before == s.label, after != s.label, linf))
    })?;
    let correct = perturbed.iter().filter(|p| p.1).count();
    let flipped = perturbed.iter().filter(|p| p.1 && p.2).count();
    let linf = perturbed.iter().map(|p| p.3).fold(0.0f32, f32::max);
    let adversarial = Dataset::new(perturbed.into_iter().map(|p| p.0).collect(), model.class_count)?;
    save_dataset(&adversarial, dir.join("adversarial.nnst"))?;
    metrics(
        &dir,
        "attack",
        &[
            metric("method", &method),
            metric("eps", eps),
            metric("samples", data.len()),
            metric("correct_before", correct),
            metric("flipped", flipped),
            metric("success_rate", if correct == 0 { 0.0 } else { flipped as f64 / correct as f64 }),
            metric("max_linf", linf),
        ],
    )?;
    println!("{method} eps {eps}: {flipped} of {correct} correctly classified samples flipped");
    Ok(())
}

fn prune_cmd(a: PruneArgs) -> Outcome {
    let model = model_arg(&a.model)?;
    let targets = parse_classes(&need(&a.outputs, "--outputs")?, model.class_count)?;
    let ratio = check_unit(need(&a.ratio, "--ratio")?, "--ratio")?;
    let theta = check_theta(a.theta.unwrap_or(0.3))?;
    let seed = a.common.seed();
    let mode = mode_arg(&a.mode, seed)?;
    let workers = a.common.workers()?;
    let needs_table = mode == SelectionMode::Contrib || a.sweep;
    let data = if a.data.is_some() || needs_table || a.epochs.unwrap_or(0) > 0 {
        Some(data_arg(&a.data, "--data", &model)?)
    } else {
        None
    };
    let test = match &a.eval {
        Some(_) => Some(data_arg(&a.eval, "--eval", &model)?),
        None if a.sweep => return invalid("--sweep needs --eval"),
        None => None,
    };
    let table_ = if needs_table {
        let slicer = slicer_arg(&a.profile, &model)?;
        Some(target_table(&slicer, data.as_ref().unwrap(), &targets, theta, &workers)?)
    } else {
        None
    };
    let dir = a.common.out_dir()?;
    let cfg = PruneConfig {
        targets: targets.clone(),
        ratio,
        theta,
        mode,
    };
    let pruned = prune(&model, table_.as_ref(), &cfg)?;
    let epochs = a.epochs.unwrap_or(0);
    let result = if epochs > 0 {
        let train = TrainConfig {
            learning_rate: a.lr.unwrap_or(0.01),
            batch_size: 32,
            epochs,
            seed,
        };
        fine_tune(&pruned, data.as_ref().unwrap(), &targets, &train)?
    } else {
        pruned.model.clone()
    };
    save_model(&result, dir.join("pruned.nnsm"))?;

    let mut rows = vec![
        metric("mode", mode_name(mode)),
        metric("ratio", ratio),
        metric("theta", theta),
        metric("pruned_synapses", pruned.synapses.len()),
        metric("pruned_neurons", pruned.neurons.len()),
        metric("fine_tune_epochs", epochs),
    ];
    if let Some(test) = &test {
        let before = evaluate(&model, test, Some(&targets), &workers)?;
        let after = evaluate(&result, test, Some(&targets), &workers)?;
        rows.push(metric("target_accuracy_unpruned", before));
        rows.push(metric("target_accuracy", after));
        println!("target accuracy {after:.4} (unpruned {before:.4})");
    }
    metrics(&dir, "prune", &rows)?;

    if a.sweep {
        #[derive(Serialize)]
        struct Point {
            mode: &'static str,
            ratio: f64,
            accuracy: f64,
        }
        let test = test.as_ref().unwrap();
        let mut points = Vec::new();
        for m in [SelectionMode::Contrib, SelectionMode::Weight, SelectionMode::Random { seed }] {
            for step in 0..10 {
                let r = step as f64 / 10.0;
                let cfg = PruneConfig {
                    targets: targets.clone(),
                    ratio: r,
                    theta,
                    mode: m,
                };
                let p = prune(&model, table_.as_ref(), &cfg)?;
                points.push(Point {
                    mode: mode_name(m),
                    ratio: r,
                    accuracy: evaluate(&p.model, test, Some(&targets), &workers)?,
                });
            }
        }
        table(&dir, "prune_sweep", &["mode", "ratio", "accuracy"], &points)?;
    }
    println!("pruned {} synapses and {} neurons", pruned.synapses.len(), pruned.neurons.len());
    Ok(())
}

fn protect(a: ProtectArgs) -> Outcome {
    let model = model_arg(&a.model)?;
    let targets = parse_classes(&need(&a.outputs, "--outputs")?, model.class_count)?;
    let fraction = check_unit(need(&a.fraction, "--fraction")?, "--fraction")?;
    let theta = check_theta(a.theta.unwrap_or(0.3))?;
    let seed = a.common.seed();
    let mode = mode_arg(&a.mode, seed)?;
    let attacker = data_arg(&a.attacker_data, "--attacker-data", &model)?;
    let test = data_arg(&a.eval, "--eval", &model)?;
    let workers = a.common.workers()?;
    let table_ = if mode == SelectionMode::Contrib {
        let slicer = slicer_arg(&a.profile, &model)?;
        let data = data_arg(&a.data, "--data", &model)?;
        Some(target_table(&slicer, &data, &targets, theta, &workers)?)
    } else {
        None
    };
    let dir = a.common.out_dir()?;
    let hidden = select_protected(&model, table_.as_ref(), fraction, mode)?;
    let cfg = ExtractionConfig {
        train: TrainConfig {
            learning_rate: a.lr.unwrap_or(0.05),
            batch_size: 32,
            epochs: a.epochs.unwrap_or(5),
            seed,
        },
        init_seed: seed,
        ..ExtractionConfig::default()
    };
    cfg.train.validate()?;
    let extraction = simulate_extraction(&model, &hidden, &attacker, &test, &targets, &cfg, &workers)?;
    save_model(&extraction.model, dir.join("recovered.nnsm"))?;

    #[derive(Serialize)]
    struct Hidden {
        synapse: usize,
    }
    let rows: Vec<Hidden> = hidden.synapses.iter().map(|&synapse| Hidden { synapse }).collect();
    table(&dir, "hidden", &["synapse"], &rows)?;
    metrics(
        &dir,
        "protect",
        &[
            metric("mode", mode_name(mode)),
            metric("fraction", fraction),
            metric("hidden_synapses", hidden.synapses.len()),
            metric("attacker_samples", attacker.len()),
            metric("epochs", cfg.train.epochs),
            metric("target_accuracy_original", evaluate(&model, &test, Some(&targets), &workers)?),
            metric("all_accuracy_original", evaluate(&model, &test, None, &workers)?),
            metric("target_accuracy_recovered", extraction.target_accuracy),
            metric("all_accuracy_recovered", extraction.all_accuracy),
        ],
    )?;
    println!(
        "attacker recovered target accuracy {:.4}, all-class accuracy {:.4}",
        extraction.target_accuracy, extraction.all_accuracy
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Outcome {
    let model = model_arg(&a.model)?;
    let data = data_arg(&a.data, "--data", &model)?;
    let classes = match &a.outputs {
        Some(text) => Some(parse_classes(text, model.class_count)?),
        None => None,
    };
    let workers = a.common.workers()?;
    let dir = a.common.out_dir()?;
    let accuracy = evaluate(&model, &data, classes.as_deref(), &workers)?;
    let counted = classes.as_ref().map_or(data.len(), |c| data.restrict(c).len());
    metrics(&dir, "eval", &[metric("samples", counted), metric("accuracy", accuracy)])?;
    println!("accuracy {accuracy:.4} over {counted} samples");
    Ok(())
}

fn oracle_check(a: OracleArgs) -> Outcome {
    let cases = a.cases.unwrap_or(100);
    if cases == 0 {
        return invalid("--cases must be at least 1");
    }
    let dir = a.common.out_dir()?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.common.seed());
    let thetas = [0.0f32, 0.1, 0.3];

    #[derive(Serialize)]
    struct Case {
        case: usize,
        seed: u64,
        theta: f32,
        exact: bool,
    }
    let mut rows = Vec::with_capacity(cases);
    for case in 0..cases {
        let seed: u64 = rng.gen();
        let theta = thetas[case % thetas.len()];
        let c = slice_case(seed, theta);
        let fast = backward_slice(&c.model, &c.profile, &c.sample, &c.outputs, theta)?;
        let slow = oracle_backward(&c.model, &c.profile, &c.sample, &c.outputs, theta)?;
        rows.push(Case {
            case,
            seed,
            theta,
            exact: fast == slow,
        });
    }
    table(&dir, "oracle_check", &["case", "seed", "theta", "exact"], &rows)?;
    let matches = rows.iter().filter(|r| r.exact).count();
    println!("{matches}/{cases} exact matches");
    if matches == cases {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("{} cases disagree with the reference slicer", cases - matches)))
    }
}
