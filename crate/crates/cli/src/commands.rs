use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;
use sparse_prefill::metrics::error_stats;
use sparse_prefill::selection::{score_selection, select};
use sparse_prefill::tensor::load_raw;
use sparse_prefill::workloads::{generate_heavy_tail_row, heavy_tail_score_map, planted_recall, Recall};
use sparse_prefill::*;

use crate::report::{Cell, Format, RunReport};
use crate::{
    AttendArgs, CliError, Command, CommonArgs, DiscoverArgs, GenArgs, PatternKind, RuleArgs, RuleKind, SelectArgs,
    Staged, SweepArgs, TensorArgs, WorkloadArgs,
};

pub(crate) type Outcome = (RunReport, Format, Option<PathBuf>, Staged);

pub(crate) fn dispatch(command: Command) -> Result<Outcome, CliError> {
    match command {
        Command::Discover(a) => discover_cmd(a),
        Command::Select(a) => select_cmd(a),
        Command::Attend(a) => attend_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Gen(a) => gen_cmd(a),
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

fn parse_index(target: &str) -> Result<usize, CliError> {
    target
        .trim()
        .parse()
        .map_err(|_| usage(format!("--target expects a non-negative integer, got {target:?}")))
}

fn planted_spec(w: &WorkloadArgs, kind: PatternKind, block_size: usize, seq_len: usize, seed: u64) -> Result<PlantedSpec, CliError> {
    let target = w.target.as_deref();
    let pattern = match kind {
        PatternKind::Vertical => Pattern::Vertical {
            block: target.map(parse_index).transpose()?.unwrap_or(0),
        },
        PatternKind::Slash => Pattern::Slash {
            offset: target.map(parse_index).transpose()?.unwrap_or(block_size),
        },
        PatternKind::Needle => Pattern::Needle {
            token: target.map(parse_index).transpose()?.unwrap_or(0),
        },
        PatternKind::Block => {
            let (row, col) = match target {
                Some(t) => {
                    let (r, c) = t
                        .split_once(',')
                        .ok_or_else(|| usage(format!("block --target expects ROW,COL, got {t:?}")))?;
                    (parse_index(r)?, parse_index(c)?)
                }
                None => (seq_len.div_ceil(block_size.max(1)).saturating_sub(1), 0),
            };
            Pattern::Block { row, col }
        }
    };
    Ok(PlantedSpec {
        pattern,
        strength: w.strength,
        base_noise: w.noise,
        local_bias: w.local_bias,
        alternating_queries: w.alternating,
        rng_seed: seed,
    })
}

/// Nearest f64 to the shortest decimal form of `x`.
fn widen(x: f32) -> f64 {
    x.to_string().parse().unwrap_or(x as f64)
}

fn workload_params(w: &WorkloadArgs) -> serde_json::Value {
    json!({
        "pattern": w.pattern.map(|p| format!("{p:?}").to_lowercase()),
        "target": w.target,
        "strength": widen(w.strength),
        "noise": widen(w.noise),
        "local_bias": widen(w.local_bias),
        "alternating": w.alternating,
        "seq_len": w.seq_len,
        "head_dim": w.head_dim,
        "heads": w.heads,
        "batch": w.batch,
    })
}

/// Echo of where the tensors come from: file paths, or generator settings.
fn input_params(tensors: &TensorArgs, workload: &WorkloadArgs) -> serde_json::Value {
    if tensors.q.is_some() || tensors.k.is_some() || tensors.v.is_some() {
        json!({"q": tensors.q, "k": tensors.k, "v": tensors.v})
    } else {
        workload_params(workload)
    }
}

/// Query, key, and optional value tensors plus what is known about their
/// planted structure.
struct Inputs {
    q: SequenceBatch,
    k: SequenceBatch,
    v: Option<SequenceBatch>,
    planted: Option<Vec<(usize, usize)>>,
    label: String,
}

fn load_inputs(
    tensors: &TensorArgs,
    workload: &WorkloadArgs,
    common: &CommonArgs,
    need_values: bool,
    report: &mut RunReport,
) -> Result<Inputs, CliError> {
    let start = Instant::now();
    let inputs = if tensors.q.is_some() || tensors.k.is_some() || tensors.v.is_some() {
        let (Some(qp), Some(kp)) = (&tensors.q, &tensors.k) else {
            return Err(usage("tensor input needs both --q and --k"));
        };
        let v = match (&tensors.v, need_values) {
            (Some(vp), _) => Some(load_tensor(vp, Role::Value)?),
            (None, true) => return Err(usage("attention needs --v alongside --q and --k")),
            (None, false) => None,
        };
        Inputs {
            q: load_tensor(qp, Role::Query)?,
            k: load_tensor(kp, Role::Key)?,
            v,
            planted: None,
            label: "files".into(),
        }
    } else {
        let Some(kind) = workload.pattern else {
            return Err(usage("provide --q/--k tensor files or a --pattern to generate"));
        };
        let spec = planted_spec(workload, kind, common.block_size, workload.seq_len, common.seed)?;
        let w = generate_planted(
            &spec,
            workload.batch,
            workload.heads,
            workload.seq_len,
            workload.head_dim,
            common.block_size,
        )?;
        Inputs {
            q: w.queries,
            k: w.keys,
            v: Some(w.values),
            planted: Some(w.planted),
            label: spec.pattern.name().into(),
        }
    };
    report.time(if inputs.planted.is_some() { "generate" } else { "load" }, start.elapsed());
    Ok(inputs)
}

fn rule_of(args: &RuleArgs, alpha: f32) -> SelectionRule {
    match args.rule {
        RuleKind::Max => SelectionRule::MaxThreshold { alpha },
        RuleKind::Topk => SelectionRule::TopK { k: args.topk },
        RuleKind::Topp => SelectionRule::TopP { p: args.topp },
    }
}

fn rule_params(args: &RuleArgs) -> serde_json::Value {
    json!({"rule": format!("{:?}", args.rule).to_lowercase(), "topk": args.topk, "topp": widen(args.topp)})
}

fn merge(mut a: serde_json::Value, b: serde_json::Value) -> serde_json::Value {
    if let (Some(a), serde_json::Value::Object(b)) = (a.as_object_mut(), b) {
        a.extend(b);
    }
    a
}

/// Score-rule recall of planted pairs (no structural retention).
fn rule_recall(map: &BlockScoreMap, rule: SelectionRule, planted: &[(usize, usize)]) -> Recall {
    let selected = score_selection(map, rule);
    let s = map.shape();
    let mut recall = Recall::default();
    for z in 0..s.batch {
        for h in 0..s.heads {
            for &(i, j) in planted {
                recall.total += 1;
                recall.hits += usize::from(selected[s.row_offset(z, h, i) + j]);
            }
        }
    }
    recall
}

fn discover_cmd(a: DiscoverArgs) -> Result<Outcome, CliError> {
    let config = a.common.config();
    config.validate()?;
    let params = merge(input_params(&a.tensors, &a.workload), json!({"method": a.method.name()}));
    let mut report = RunReport::new("discover", a.common.echo(params));
    let inputs = load_inputs(&a.tensors, &a.workload, &a.common, false, &mut report)?;
    let shape = inputs.q.shape();
    let grid = BlockGrid::new(shape.seq_len, config.block_size)?;

    let start = Instant::now();
    let map = a.method.run(&inputs.q, &inputs.k, &grid, config.scale_for(shape.head_dim))?;
    let elapsed = ms(start);
    report.time("discover", start.elapsed());

    report.cells.push(Cell {
        seq_len: Some(shape.seq_len),
        num_blocks: grid.num_blocks(),
        workload: Some(inputs.label),
        discovery: Some(a.method.name().into()),
        recall: inputs
            .planted
            .as_deref()
            .and_then(|p| planted_recall(&map, p, config.alpha).fraction()),
        elapsed_ms: Some(elapsed),
        ..Default::default()
    });
    let mut staged = Staged::default();
    if let Some(dir) = &a.save_dir {
        staged.add_tensor(dir, "scores.fpt", &map.to_raw())?;
    }
    Ok((report, a.common.format, a.common.out, staged))
}

fn plan_cell(plan: &SparseBlockPlan) -> (f64, u64, u64) {
    let visits = visit_count(plan);
    let full = plan.shape().causal_pairs() as u64;
    (visits as f64 / full as f64, visits, full)
}

fn select_cmd(a: SelectArgs) -> Result<Outcome, CliError> {
    let config = a.common.config();
    config.validate()?;
    let rule = rule_of(&a.rule, config.alpha);
    rule.validate()?;
    let source = match &a.scores {
        Some(path) => json!({"scores": path}),
        None => input_params(&a.tensors, &a.workload),
    };
    let params = merge(source, rule_params(&a.rule));
    let mut report = RunReport::new("select", a.common.echo(params));

    let (map, seq_len, label, planted) = match &a.scores {
        Some(path) => {
            let start = Instant::now();
            let map = BlockScoreMap::from_raw(load_raw(path)?)?;
            report.time("load", start.elapsed());
            (map, None, "score-file".to_string(), None)
        }
        None => {
            let inputs = load_inputs(&a.tensors, &a.workload, &a.common, false, &mut report)?;
            let shape = inputs.q.shape();
            let grid = BlockGrid::new(shape.seq_len, config.block_size)?;
            let start = Instant::now();
            let map = discover(&inputs.q, &inputs.k, &grid, config.scale_for(shape.head_dim))?;
            report.time("discover", start.elapsed());
            (map, Some(shape.seq_len), inputs.label, inputs.planted)
        }
    };

    let start = Instant::now();
    let mask = select(&map, rule, Retention::from_config(&config))?;
    let plan = compress_indices(&mask);
    let elapsed = ms(start);
    report.time("select", start.elapsed());

    let (density, visits, full) = plan_cell(&plan);
    report.cells.push(Cell {
        seq_len,
        num_blocks: map.shape().num_blocks,
        workload: Some(label),
        method: Some(rule.method_name().into()),
        parameter: Some(rule.parameter()),
        density: Some(density),
        visits: Some(visits),
        full_visits: Some(full),
        recall: planted.as_deref().and_then(|p| rule_recall(&map, rule, p).fraction()),
        elapsed_ms: Some(elapsed),
        ..Default::default()
    });
    let mut staged = Staged::default();
    if let Some(dir) = &a.save_dir {
        let (indices, counts) = plan.to_raw();
        staged.add_tensor(dir, "plan_indices.fpt", &indices)?;
        staged.add_tensor(dir, "plan_counts.fpt", &counts)?;
        staged.add_tensor(dir, "mask.fpt", &mask.to_raw())?;
    }
    Ok((report, a.common.format, a.common.out, staged))
}

fn load_plan(dir: &Path) -> Result<SparseBlockPlan, CliError> {
    let indices = load_raw(dir.join("plan_indices.fpt"))?;
    let counts = load_raw(dir.join("plan_counts.fpt"))?;
    Ok(SparseBlockPlan::from_raw(indices, counts)?)
}

fn attend_cmd(a: AttendArgs) -> Result<Outcome, CliError> {
    let config = a.common.config();
    config.validate()?;
    if a.dense && (a.check || a.plan.is_some()) {
        return Err(usage("--dense runs only the reference; it cannot be combined with --check or --plan"));
    }
    let rule = rule_of(&a.rule, config.alpha);
    rule.validate()?;
    let params = merge(
        merge(input_params(&a.tensors, &a.workload), rule_params(&a.rule)),
        json!({"plan": a.plan, "dense": a.dense, "check": a.check, "natural_log": a.natural_log}),
    );
    let mut report = RunReport::new("attend", a.common.echo(params));
    let inputs = load_inputs(&a.tensors, &a.workload, &a.common, true, &mut report)?;
    let v = inputs.v.as_ref().expect("values loaded");
    let shape = inputs.q.shape();
    let grid = BlockGrid::new(shape.seq_len, config.block_size)?;
    let scale = config.scale_for(shape.head_dim);
    let full = (shape.slabs() * grid.causal_pairs()) as u64;

    let mut cell = Cell {
        seq_len: Some(shape.seq_len),
        num_blocks: grid.num_blocks(),
        workload: Some(inputs.label.clone()),
        full_visits: Some(full),
        ..Default::default()
    };
    let output = if a.dense {
        let start = Instant::now();
        let out = dense_attention(&inputs.q, &inputs.k, v, scale)?;
        cell.elapsed_ms = Some(ms(start));
        report.time("dense", start.elapsed());
        cell.method = Some("dense".into());
        cell.density = Some(1.0);
        cell.visits = Some(full);
        out
    } else {
        let plan = match &a.plan {
            Some(dir) => {
                let start = Instant::now();
                let plan = load_plan(dir)?;
                report.time("load", start.elapsed());
                cell.method = Some("plan-file".into());
                plan
            }
            None => {
                let start = Instant::now();
                let map = discover(&inputs.q, &inputs.k, &grid, scale)?;
                report.time("discover", start.elapsed());
                let start = Instant::now();
                let plan = compress_indices(&select(&map, rule, Retention::from_config(&config))?);
                report.time("select", start.elapsed());
                cell.method = Some(rule.method_name().into());
                cell.parameter = Some(rule.parameter());
                plan
            }
        };
        let start = Instant::now();
        let (out, visits) = block_sparse_attention_counted(&inputs.q, &inputs.k, v, &plan, &grid, scale)?;
        cell.elapsed_ms = Some(ms(start));
        report.time("attend", start.elapsed());
        cell.visits = Some(visits);
        cell.density = Some(visits as f64 / full as f64);
        if a.check {
            let start = Instant::now();
            let dense = dense_attention(&inputs.q, &inputs.k, v, scale)?;
            report.time("dense", start.elapsed());
            let o = error_stats(out.output(), dense.output());
            cell.max_abs_err = Some(o.max_abs);
            cell.mean_abs_err = Some(o.mean_abs);
            cell.lse_max_abs_err = Some(error_stats(out.lse(), dense.lse()).max_abs);
        }
        out
    };
    report.cells.push(cell);

    let mut staged = Staged::default();
    if let Some(dir) = &a.save_dir {
        let (o, lse) = output.to_raw(a.natural_log);
        staged.add_tensor(dir, "o.fpt", &o)?;
        staged.add_tensor(dir, "lse.fpt", &lse)?;
    }
    Ok((report, a.common.format, a.common.out, staged))
}

fn sweep_rules(a: &SweepArgs) -> Vec<SelectionRule> {
    let mut rules: Vec<SelectionRule> = a.alphas.iter().map(|&alpha| SelectionRule::MaxThreshold { alpha }).collect();
    rules.extend(a.topk.iter().map(|&k| SelectionRule::TopK { k }));
    rules.extend(a.topp.iter().map(|&p| SelectionRule::TopP { p }));
    if rules.is_empty() {
        rules = [0.0, 0.05, 0.12, 0.5, 1.0]
            .into_iter()
            .map(|alpha| SelectionRule::MaxThreshold { alpha })
            .collect();
    }
    rules
}

fn sweep_cmd(a: SweepArgs) -> Result<Outcome, CliError> {
    let config = a.common.config();
    config.validate()?;
    if a.trials == 0 {
        return Err(usage("--trials must be at least 1"));
    }
    let rules = sweep_rules(&a);
    for rule in &rules {
        rule.validate()?;
    }
    let lengths = if a.lengths.is_empty() { vec![a.workload.seq_len] } else { a.lengths.clone() };
    let params = merge(
        workload_params(&a.workload),
        json!({
            "rules": rules.iter().map(|r| format!("{}:{}", r.method_name(), r.parameter())).collect::<Vec<_>>(),
            "lengths": lengths,
            "methods": a.methods.iter().map(|m| m.name()).collect::<Vec<_>>(),
            "trials": a.trials,
            "heavy_tail": a.heavy_tail,
            "blocks": a.blocks,
            "head_mass": widen(a.head_mass),
            "tail_alpha": widen(a.tail_alpha),
        }),
    );
    let mut report = RunReport::new("sweep", a.common.echo(params));
    if a.heavy_tail {
        heavy_tail_sweep(&a, &config, &rules, &mut report)?;
    } else {
        workload_sweep(&a, &config, &rules, &lengths, &mut report)?;
    }
    Ok((report, a.common.format, a.common.out, Staged::default()))
}

fn heavy_tail_sweep(a: &SweepArgs, config: &PipelineConfig, rules: &[SelectionRule], report: &mut RunReport) -> Result<(), CliError> {
    let start = Instant::now();
    let rows: Vec<Vec<f32>> = (0..a.trials)
        .map(|t| generate_heavy_tail_row(a.blocks, a.head_mass, a.tail_alpha, a.common.seed + t))
        .collect::<Result<_>>()?;
    report.time("generate", start.elapsed());
    // Each row is scored as the last causal row of an n-block map.
    let retention = Retention::from_config(config);
    for &rule in rules {
        let start = Instant::now();
        let (mut selected, mut head_kept) = (0usize, 0usize);
        for row in &rows {
            let head = sparse_prefill::metrics::argmax(row).expect("row is non-empty");
            let sel = rule.select_row(row, retention);
            selected += sel.iter().filter(|&&x| x).count();
            head_kept += usize::from(sel[head]);
        }
        let n = rows.len();
        report.time("select", start.elapsed());
        report.cells.push(Cell {
            num_blocks: a.blocks,
            workload: Some("heavy-tail".into()),
            method: Some(rule.method_name().into()),
            parameter: Some(rule.parameter()),
            density: Some(selected as f64 / (n * a.blocks) as f64),
            visits: Some(selected as u64),
            full_visits: Some((n * a.blocks) as u64),
            head_retained: Some(head_kept as f64 / n as f64),
            elapsed_ms: Some(ms(start)),
            ..Default::default()
        });
    }
    Ok(())
}

fn workload_sweep(
    a: &SweepArgs,
    config: &PipelineConfig,
    rules: &[SelectionRule],
    lengths: &[usize],
    report: &mut RunReport,
) -> Result<(), CliError> {
    let kind = a.workload.pattern.unwrap_or(PatternKind::Vertical);
    let retention = Retention::from_config(config);
    let w = &a.workload;
    for &l in lengths {
        let grid = BlockGrid::new(l, config.block_size)?;
        let scale = config.scale_for(w.head_dim);
        for &method in &a.methods {
            // Per rule: density sum, visit sum, full-visit sum, recall.
            let mut acc = vec![(0.0f64, 0u64, 0u64, Recall::default()); rules.len()];
            let mut discover_ms = 0.0;
            for t in 0..a.trials {
                let start = Instant::now();
                let spec = planted_spec(w, kind, config.block_size, l, a.common.seed + t)?;
                let wl = generate_planted(&spec, w.batch, w.heads, l, w.head_dim, config.block_size)?;
                report.time("generate", start.elapsed());
                let start = Instant::now();
                let map = method.run(&wl.queries, &wl.keys, &grid, scale)?;
                discover_ms += ms(start);
                report.time("discover", start.elapsed());
                let start = Instant::now();
                for (slot, &rule) in acc.iter_mut().zip(rules) {
                    let plan = compress_indices(&select(&map, rule, retention)?);
                    let (density, visits, full) = plan_cell(&plan);
                    slot.0 += density;
                    slot.1 += visits;
                    slot.2 += full;
                    slot.3 = slot.3.merge(rule_recall(&map, rule, &wl.planted));
                }
                report.time("select", start.elapsed());
            }
            for ((density, visits, full, recall), &rule) in acc.into_iter().zip(rules) {
                report.cells.push(Cell {
                    seq_len: Some(l),
                    num_blocks: grid.num_blocks(),
                    workload: Some(format!("{kind:?}").to_lowercase()),
                    discovery: Some(method.name().into()),
                    method: Some(rule.method_name().into()),
                    parameter: Some(rule.parameter()),
                    density: Some(density / a.trials as f64),
                    visits: Some(visits),
                    full_visits: Some(full),
                    recall: recall.fraction(),
                    elapsed_ms: Some(discover_ms / a.trials as f64),
                    ..Default::default()
                });
            }
        }
    }
    Ok(())
}

fn gen_cmd(a: GenArgs) -> Result<Outcome, CliError> {
    let config = a.common.config();
    config.validate()?;
    let params = merge(
        workload_params(&a.workload),
        json!({"heavy_tail": a.heavy_tail, "blocks": a.blocks, "head_mass": widen(a.head_mass), "tail_alpha": widen(a.tail_alpha)}),
    );
    let mut report = RunReport::new("gen", a.common.echo(params));
    let mut staged = Staged::default();
    let start = Instant::now();
    if a.heavy_tail {
        let map = heavy_tail_score_map(a.blocks, a.workload.heads, a.head_mass, a.tail_alpha, a.common.seed)?;
        staged.add_tensor(&a.save_dir, "scores.fpt", &map.to_raw())?;
        report.cells.push(Cell {
            num_blocks: a.blocks,
            workload: Some("heavy-tail".into()),
            elapsed_ms: Some(ms(start)),
            ..Default::default()
        });
    } else {
        let w = &a.workload;
        let kind = w.pattern.unwrap_or(PatternKind::Vertical);
        let spec = planted_spec(w, kind, config.block_size, w.seq_len, a.common.seed)?;
        let wl = generate_planted(&spec, w.batch, w.heads, w.seq_len, w.head_dim, config.block_size)?;
        staged.add_tensor(&a.save_dir, "q.fpt", &wl.queries.to_raw())?;
        staged.add_tensor(&a.save_dir, "k.fpt", &wl.keys.to_raw())?;
        staged.add_tensor(&a.save_dir, "v.fpt", &wl.values.to_raw())?;
        staged.add_tensor(&a.save_dir, "ground_truth.fpt", &wl.ground_truth.to_raw())?;
        report.cells.push(Cell {
            seq_len: Some(w.seq_len),
            num_blocks: wl.ground_truth.shape().num_blocks,
            workload: Some(spec.pattern.name().into()),
            elapsed_ms: Some(ms(start)),
            ..Default::default()
        });
    }
    report.time("generate", start.elapsed());
    Ok((report, a.common.format, a.common.out, staged))
}
