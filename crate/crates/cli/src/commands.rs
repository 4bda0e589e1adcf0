use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use unikw_core::corpus::{build_vocab, load_pairs};
use unikw_core::decoder::Order;
use unikw_core::eval::{evaluate, length_distribution, LabeledSet, MetricsReport, RankedQuery};
use unikw_core::retriever::{bench, overlap_stats, BeamBench, BundleOptions, ResultLine};
use unikw_core::synth::mapping_corpus;
use unikw_core::{
    train, Catalog, Direction, EncoderParams, EngineBundle, GraphParams, IndexKind, KeywordId, KeywordTrie,
    MatchType, OverlapScorer, RetrieveConfig, TrainConfig, Vocab,
};

use crate::error::CliError;
use crate::meta::{read_string, sidecar, write_file, write_json, Metadata};
use crate::{Cli, Command, Global, Kind, Match, RetrieveOpts, ScorerName, TrieDirection};

fn load_config<T: for<'de> Deserialize<'de> + Default>(global: &Global) -> Result<T, CliError> {
    match &global.config {
        Some(path) => serde_json::from_str(&read_string(path)?)
            .map_err(|e| CliError::validation(format!("{}: {e}", path.display()))),
        None => Ok(T::default()),
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("configs serialize")
}

fn metadata(command: &'static str, global: &Global, seed: u64, config: Value) -> Result<Metadata, CliError> {
    let mut meta = Metadata::new(command, seed, global.threads, config);
    if let Some(path) = &global.config {
        meta.input("config", path)?;
    }
    Ok(meta)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let global = cli.global;
    if let Some(n) = global.threads {
        if n == 0 {
            return Err(CliError::validation("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::internal(e.to_string()))?;
    }
    match cli.command {
        Command::BuildVocab {
            keywords,
            pairs,
            min_count,
            out,
        } => {
            let vocab = build_vocab(&keywords, &pairs, min_count)?;
            vocab.save(&out)?;
            let mut meta = metadata("build-vocab", &global, global.seed.unwrap_or(0), json!({ "min_count": min_count }))?;
            meta.input("keywords", &keywords)?;
            meta.input("pairs", &pairs)?;
            write_json(
                &sidecar(&out),
                &json!({ "metadata": meta, "size": vocab.len(), "checksum": vocab.checksum() }),
            )
        }
        Command::BuildTrie {
            keywords,
            vocab,
            direction,
            max_len,
            out,
        } => {
            let v = Vocab::load(&vocab)?;
            let catalog = Catalog::load(&keywords)?;
            let (unique, duplicates) = catalog.tokenize_unique(&v, max_len);
            let dir = match direction {
                TrieDirection::Fwd => Direction::Forward,
                TrieDirection::Rev => Direction::Reversed,
            };
            let trie = KeywordTrie::build(unique.iter().map(|(id, s)| (*id, s.ids())), dir, v.checksum())?;
            trie.save(&out)?;
            let stats = trie.memory_stats();
            let mut meta = metadata(
                "build-trie",
                &global,
                global.seed.unwrap_or(0),
                json!({ "direction": dir, "max_len": max_len }),
            )?;
            meta.input("keywords", &keywords)?;
            meta.input("vocab", &vocab)?;
            let report = json!({
                "metadata": meta,
                "memory_stats": stats,
                "raw_utf8_bytes": catalog.to_file_string().len(),
                "dropped_duplicates": duplicates.len(),
            });
            println!("{}", serde_json::to_string(&report)?);
            write_json(&sidecar(&out), &report)
        }
        Command::Train {
            pairs,
            vocab,
            keywords,
            out,
        } => {
            let mut config: TrainConfig = load_config(&global)?;
            if let Some(seed) = global.seed {
                config.seed = seed;
            }
            config.validate()?;
            let v = Vocab::load(&vocab)?;
            let catalog = Catalog::load(&keywords)?;
            let loaded = load_pairs(&pairs, &v, &catalog, config.max_len)?;
            let report = train(&config, &loaded.pairs, &v)?;
            report.params.save(&out)?;
            let mut meta = metadata("train", &global, config.seed, to_value(&config))?;
            meta.input("pairs", &pairs)?;
            meta.input("vocab", &vocab)?;
            meta.input("keywords", &keywords)?;
            write_json(
                &sidecar(&out),
                &json!({
                    "metadata": meta,
                    "pairs": loaded.pairs.len(),
                    "malformed_lines": loaded.malformed,
                    "initial_loss": report.initial_loss,
                    "final_loss": report.final_loss,
                    "epoch_losses": report.epoch_losses,
                }),
            )
        }
        Command::Index {
            checkpoint,
            keywords,
            vocab,
            kind,
            out,
            cluster_threshold,
        } => {
            let mut config: IndexConfig = load_config(&global)?;
            if let Some(seed) = global.seed {
                config.graph.seed = seed;
            }
            let options = BundleOptions {
                kind: match kind {
                    Kind::Exact => IndexKind::Exact,
                    Kind::Graph => IndexKind::Graph,
                },
                graph: config.graph,
                cluster_threshold,
                retrieve: config.retrieve.clone(),
            };
            let params = EncoderParams::load(&checkpoint)?;
            let bundle = EngineBundle::build(params, Vocab::load(&vocab)?, Catalog::load(&keywords)?, &options)?;
            bundle.save(&out)?;
            let mut meta = metadata(
                "index",
                &global,
                config.graph.seed,
                json!({ "index": to_value(&config), "kind": options.kind, "cluster_threshold": cluster_threshold }),
            )?;
            meta.input("checkpoint", &checkpoint)?;
            meta.input("keywords", &keywords)?;
            meta.input("vocab", &vocab)?;
            write_json(
                &out.join("meta.json"),
                &json!({
                    "metadata": meta,
                    "trie_keywords": bundle.manifest.trie_keywords,
                    "indexed_keywords": bundle.manifest.indexed_keywords,
                    "forward_trie": bundle.forward.memory_stats(),
                    "reversed_trie": bundle.reversed.memory_stats(),
                }),
            )
        }
        Command::Retrieve {
            bundle_dir,
            queries,
            opts,
            out,
        } => {
            let bundle = EngineBundle::load(&bundle_dir)?;
            let config = retrieve_config(&global, &bundle, &opts)?;
            let lines = query_lines(&queries)?;
            let results: Vec<ResultLine> = lines
                .par_iter()
                .map(|q| {
                    bundle
                        .retrieve_with(q, &config)
                        .map(|r| ResultLine::new(q, &r.results))
                })
                .collect::<Result<_, _>>()?;
            let mut text = String::new();
            for line in &results {
                text.push_str(&serde_json::to_string(line)?);
                text.push('\n');
            }
            write_file(&out, text.as_bytes())?;
            let mut meta = metadata("retrieve", &global, global.seed.unwrap_or(0), to_value(&config))?;
            meta.input("bundle_dir", &bundle_dir)?;
            meta.input("queries", &queries)?;
            write_json(
                &sidecar(&out),
                &json!({ "metadata": meta, "queries": results.len(), "forward_passes": bundle.encoder.forward_passes() }),
            )
        }
        Command::Eval {
            results,
            labels,
            propensities,
            scorer,
            match_type,
            ks,
            thresholds,
            out,
        } => {
            let lines = read_results(&results)?;
            let mut set = labels.as_deref().map(|p| read_string(p).and_then(|t| Ok(LabeledSet::parse(&t)?))).transpose()?;
            if let Some(p) = &propensities {
                let parsed = LabeledSet::parse_propensities(&read_string(p)?)?;
                match set.as_mut() {
                    Some(s) => s.propensities = Some(parsed),
                    None => return Err(CliError::validation("--propensities needs --labels")),
                }
            }
            let overlap = scorer.map(|ScorerName::Overlap| OverlapScorer {
                match_type: match match_type {
                    Match::Exact => MatchType::Exact,
                    Match::Phrase => MatchType::Phrase,
                },
            });
            let ranked: Vec<RankedQuery> = lines
                .iter()
                .map(|l| RankedQuery {
                    query: l.query.clone(),
                    results: l.results.iter().map(|r| (KeywordId(r.id), r.keyword.clone())).collect(),
                })
                .collect();
            let metrics = evaluate(
                &ranked,
                set.as_ref(),
                overlap.as_ref().map(|s| s as &dyn unikw_core::Scorer),
                &ks,
                &thresholds,
            )?;
            let lengths = length_distribution(lines.iter().flat_map(|l| {
                l.results
                    .iter()
                    .map(|r| (r.source.as_str(), r.keyword.split_whitespace().count()))
            }));
            let mut meta = metadata(
                "eval",
                &global,
                global.seed.unwrap_or(0),
                json!({ "ks": ks, "thresholds": thresholds, "scorer": metrics.scorer }),
            )?;
            meta.input("results", &results)?;
            if let Some(p) = &labels {
                meta.input("labels", p)?;
            }
            if let Some(p) = &propensities {
                meta.input("propensities", p)?;
            }
            write_json(
                &out,
                &EvalOutput {
                    metadata: meta,
                    metrics,
                    length_distribution: lengths,
                },
            )
        }
        Command::Bench {
            bundle_dir,
            queries,
            beams,
            repeat,
            out,
        } => {
            if beams.is_empty() || beams.contains(&0) {
                return Err(CliError::validation("--beams must list sizes >= 1"));
            }
            let bundle = EngineBundle::load(&bundle_dir)?;
            let lines = query_lines(&queries)?;
            let report = bench(&bundle, &lines, &beams, repeat)?;
            let mut meta = metadata(
                "bench",
                &global,
                global.seed.unwrap_or(0),
                json!({ "beams": beams, "repeat": repeat, "retrieve": bundle.config() }),
            )?;
            meta.input("bundle_dir", &bundle_dir)?;
            meta.input("queries", &queries)?;
            let growth = decode_growth(&report);
            let value = json!({ "metadata": meta, "beams": report, "decode_growth": growth });
            match out {
                Some(path) => write_json(&path, &value),
                None => {
                    println!("{}", serde_json::to_string_pretty(&value)?);
                    Ok(())
                }
            }
        }
        Command::Overlap {
            results_a,
            results_b,
            labels,
            out,
        } => {
            let a = read_results(&results_a)?;
            let b = read_results(&results_b)?;
            if a.len() != b.len() || a.iter().zip(&b).any(|(x, y)| x.query != y.query) {
                return Err(CliError::validation("result files cover different queries"));
            }
            let set = labels.as_deref().map(|p| read_string(p).and_then(|t| Ok(LabeledSet::parse(&t)?))).transpose()?;
            let keep = |q: &str, ids: BTreeSet<KeywordId>| match &set {
                Some(s) => {
                    let gold = s.get(q);
                    ids.into_iter().filter(|id| gold.contains(id)).collect()
                }
                None => ids,
            };
            let mut pooled_a = BTreeSet::new();
            let mut pooled_b = BTreeSet::new();
            for (i, (x, y)) in a.iter().zip(&b).enumerate() {
                pooled_a.extend(keep(&x.query, x.ids()).into_iter().map(|id| (i, id)));
                pooled_b.extend(keep(&y.query, y.ids()).into_iter().map(|id| (i, id)));
            }
            let stats = overlap_stats(&pooled_a, &pooled_b);
            let mut meta = metadata(
                "overlap",
                &global,
                global.seed.unwrap_or(0),
                json!({ "labeled_only": labels.is_some() }),
            )?;
            meta.input("results_a", &results_a)?;
            meta.input("results_b", &results_b)?;
            if let Some(p) = &labels {
                meta.input("labels", p)?;
            }
            let value = json!({
                "metadata": meta,
                "queries": a.len(),
                "pairs_a": pooled_a.len(),
                "pairs_b": pooled_b.len(),
                "unique_to_a_fraction": stats.unique_to_a_fraction,
                "unique_to_b_fraction": stats.unique_to_b_fraction,
                "jaccard": stats.jaccard,
            });
            match out {
                Some(path) => write_json(&path, &value),
                None => {
                    println!("{}", serde_json::to_string_pretty(&value)?);
                    Ok(())
                }
            }
        }
        Command::Synth {
            keywords,
            queries_per_keyword,
            out_dir,
        } => {
            if keywords == 0 || queries_per_keyword == 0 {
                return Err(CliError::validation("--keywords and --queries-per-keyword must be >= 1"));
            }
            let seed = global.seed.unwrap_or(0);
            let corpus = mapping_corpus(keywords, queries_per_keyword, 1, seed);
            write_file(&out_dir.join("keywords.txt"), corpus.keywords_txt().as_bytes())?;
            write_file(&out_dir.join("pairs.tsv"), corpus.pairs_tsv().as_bytes())?;
            write_file(&out_dir.join("queries.txt"), corpus.heldout_queries().as_bytes())?;
            write_file(&out_dir.join("labels.tsv"), corpus.labels_tsv().as_bytes())?;
            let meta = metadata(
                "synth",
                &global,
                seed,
                json!({ "keywords": keywords, "queries_per_keyword": queries_per_keyword }),
            )?;
            write_json(&out_dir.join("meta.json"), &json!({ "metadata": meta }))
        }
    }
}

/// Graph build parameters and the retrieval defaults stored in the bundle.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct IndexConfig {
    graph: GraphParams,
    retrieve: RetrieveConfig,
}

#[derive(Serialize)]
struct EvalOutput {
    metadata: Metadata,
    #[serde(flatten)]
    metrics: MetricsReport,
    length_distribution: BTreeMap<String, BTreeMap<usize, usize>>,
}

fn retrieve_config(global: &Global, bundle: &EngineBundle, opts: &RetrieveOpts) -> Result<RetrieveConfig, CliError> {
    let mut config = match &global.config {
        Some(_) => load_config(global)?,
        None => bundle.config().clone(),
    };
    if let Some(b) = opts.beam {
        config.decode.beam = b;
    }
    if let Some(orders) = &opts.orders {
        config.decode.orders = orders
            .iter()
            .map(|o| Order::parse(o).ok_or_else(|| CliError::validation(format!("unknown order {o:?}"))))
            .collect::<Result<_, _>>()?;
    }
    if let Some(p) = opts.prune {
        config.decode.prune = p;
    }
    if let Some(k) = opts.topk {
        config.top_k = k;
    }
    if let Some(l) = opts.search_list {
        config.search_list = l;
    }
    if opts.nlg_floor.is_some() {
        config.nlg_floor = opts.nlg_floor;
    }
    if opts.dr_floor.is_some() {
        config.dr_floor = opts.dr_floor;
    }
    if config.decode.beam == 0 {
        return Err(CliError::validation("--beam must be at least 1"));
    }
    if config.decode.orders.is_empty() {
        return Err(CliError::validation("--orders must name at least one order"));
    }
    Ok(config)
}

fn query_lines(path: &Path) -> Result<Vec<String>, CliError> {
    Ok(read_string(path)?.lines().map(str::to_string).collect())
}

fn read_results(path: &Path) -> Result<Vec<ResultLine>, CliError> {
    read_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::validation(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Ratio of mean decode time between the largest and smallest beam,
/// next to the ratio of the beam sizes themselves.
fn decode_growth(report: &[BeamBench]) -> Value {
    let (Some(lo), Some(hi)) = (
        report.iter().min_by_key(|b| b.beam),
        report.iter().max_by_key(|b| b.beam),
    ) else {
        return Value::Null;
    };
    let time_ratio = if lo.decode_ms.mean > 0.0 {
        hi.decode_ms.mean / lo.decode_ms.mean
    } else {
        0.0
    };
    let beam_ratio = hi.beam as f64 / lo.beam as f64;
    json!({
        "beam_ratio": beam_ratio,
        "decode_time_ratio": time_ratio,
        "sublinear": time_ratio < beam_ratio,
    })
}

