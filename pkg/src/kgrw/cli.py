"""Pipeline driver: ingest, corrupt, train, score, complete, extract,
evaluate, and report from one declarative config file.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import configparser
import importlib.resources
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import aeke, caged, evalkit, noran, promptforge as pf, synth
from . import autodiff as ad
from .kgstore import (KnowledgeGraph, LabeledCorpus, inject_noise, load_attributes,
                      load_graph, make_inductive_split, save_attributes, save_graph,
                      save_split, subgraph)
from .views import LinkingRule, build_triple_graph, dump_edges

SUBCOMMANDS = ("inject", "views", "train-caged", "train-aeke", "train-noran",
               "detect", "complete", "train-policy", "bandit-run", "eval",
               "gradcheck", "demo")

ALLOWED_KEYS = {
    "run": {"seed", "out"},
    "dataset": {"kg", "attributes", "questions", "corpus_dir", "noise_ratio",
                "noise_mode", "entity_fraction"},
    "caged": {"dim", "mu", "gamma", "lam", "tau", "m", "epochs", "lr",
              "batch_size", "encoder", "use_margin", "hub_cap"},
    "aeke": {"dim", "tau", "gamma", "lam1", "lam2", "beta", "epochs", "lr",
             "batch_size", "m", "hub_cap"},
    "noran": {"dim", "hidden", "k", "backbone", "estimator", "steps",
              "batch_size", "lr", "gamma", "classifier_steps", "classifier_lr",
              "hub_cap", "max_ego_nodes"},
    "promptforge": {"max_steps", "w_reach", "w_cr", "w_cs", "episodes",
                    "policy_lr", "ridge", "explore", "rounds"},
    "eval": {"ranking", "k_fractions"},
}


class ConfigError(Exception):
    pass


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="kgrw", description=__doc__)
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", required=True, help="path to an INI run config")
    parser.add_argument("--seed", type=int, default=None, help="override [run] seed")
    parser.add_argument("--out", default=None, help="override [run] out directory")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        run(args.subcommand, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3
    return 0


def load_config(path, seed: int | None = None, out: str | None = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    cfg: dict[str, dict[str, str]] = {}
    for section in parser.sections():
        if section not in ALLOWED_KEYS:
            raise ConfigError(f"unknown section [{section}] in {path}")
        cfg[section] = {}
        for key, value in parser.items(section):
            if key not in ALLOWED_KEYS[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            cfg[section][key] = value
    cfg.setdefault("run", {})
    if seed is not None:
        cfg["run"]["seed"] = str(seed)
    if out is not None:
        cfg["run"]["out"] = out
    cfg["run"].setdefault("seed", "0")
    if "out" not in cfg["run"]:
        raise ConfigError("no output directory: set [run] out or pass --out")
    return cfg


def run(subcommand: str, cfg: dict) -> None:
    out = Path(cfg["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(out / "resolved.ini", cfg)
    handler = {
        "inject": cmd_inject, "views": cmd_views, "train-caged": cmd_train_caged,
        "train-aeke": cmd_train_aeke, "train-noran": cmd_train_noran,
        "detect": cmd_detect, "complete": cmd_complete,
        "train-policy": cmd_train_policy, "bandit-run": cmd_bandit_run,
        "eval": cmd_eval, "gradcheck": cmd_gradcheck, "demo": cmd_demo,
    }[subcommand]
    handler(cfg, out)


def write_resolved_config(path, cfg: dict) -> None:
    parser = configparser.ConfigParser()
    for section in sorted(cfg):
        parser[section] = dict(sorted(cfg[section].items()))
    if "run" not in parser:
        parser["run"] = {}
    parser["run"]["version"] = __version__
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)


def write_metrics(path, metrics: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(metrics):
            value = metrics[key]
            if isinstance(value, float):
                fh.write(f"{key}\t{value:.10g}\n")
            else:
                fh.write(f"{key}\t{value}\n")


def _seed(cfg: dict) -> int:
    return int(cfg["run"]["seed"])


def _toy_path(name: str) -> Path:
    return Path(str(importlib.resources.files("kgrw").joinpath("assets", "toy", name)))


def _load_kg(cfg: dict) -> KnowledgeGraph:
    ds = cfg.get("dataset", {})
    kg_path = ds.get("kg", "toy")
    if kg_path == "toy":
        return load_graph(_toy_path("kg.tsv"))
    if not Path(kg_path).exists():
        raise ConfigError(f"dataset kg {kg_path!r} does not exist")
    return load_graph(kg_path)


def _load_attrs(cfg: dict, kg: KnowledgeGraph):
    ds = cfg.get("dataset", {})
    attr_path = ds.get("attributes", "toy")
    if attr_path == "toy":
        return load_attributes(_toy_path("attributes.tsv"), kg)
    if not Path(attr_path).exists():
        raise ConfigError(f"attribute file {attr_path!r} does not exist")
    return load_attributes(attr_path, kg)


def _load_questions(cfg: dict, kg: KnowledgeGraph) -> list[pf.Question]:
    ds = cfg.get("dataset", {})
    q_path = ds.get("questions", "toy")
    if q_path == "toy":
        raw = synth.load_questions(_toy_path("questions.json"))
    else:
        if not Path(q_path).exists():
            raise ConfigError(f"question file {q_path!r} does not exist")
        raw = synth.load_questions(q_path)
    return [pf.question_from_dict(kg, d) for d in raw]


def _corpus_dir(cfg: dict, out: Path) -> Path:
    ds = cfg.get("dataset", {})
    return Path(ds["corpus_dir"]) if "corpus_dir" in ds else out


def _make_or_load_corpus(cfg: dict, out: Path) -> LabeledCorpus:
    corpus_dir = _corpus_dir(cfg, out)
    if (corpus_dir / "corpus.tsv").exists():
        return load_corpus(corpus_dir)
    kg = _load_kg(cfg)
    ds = cfg.get("dataset", {})
    ratio = float(ds.get("noise_ratio", "0.05"))
    mode = ds.get("noise_mode", "uniform")
    corpus = inject_noise(kg, ratio, mode, seed=_seed(cfg))
    save_corpus(out, corpus)
    return corpus


def save_corpus(out: Path, corpus: LabeledCorpus) -> None:
    save_graph(out / "corpus.tsv", corpus.graph)
    np.savetxt(out / "corpus.labels", corpus.is_error.astype(int), fmt="%d")
    meta = {"anomaly_ratio": corpus.anomaly_ratio, "seed": corpus.seed,
            "fallback_count": corpus.fallback_count}
    (out / "corpus.meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")


def load_corpus(corpus_dir: Path) -> LabeledCorpus:
    graph = load_graph(corpus_dir / "corpus.tsv")
    labels = np.loadtxt(corpus_dir / "corpus.labels", dtype=int).astype(bool)
    meta = json.loads((corpus_dir / "corpus.meta.json").read_text())
    return LabeledCorpus(graph, labels, meta["anomaly_ratio"], meta["seed"],
                         fallback_count=meta.get("fallback_count", 0))


def _hyper_from(cfg: dict, section: str, cls, seed: int):
    raw = dict(cfg.get(section, {}))
    kwargs: dict = {"seed": seed}
    fields = cls.__dataclass_fields__
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} for [{section}]")
        kind = fields[key].type
        if kind == "int":
            kwargs[key] = int(value)
        elif kind == "float":
            kwargs[key] = float(value)
        elif kind == "bool":
            kwargs[key] = value.lower() in ("1", "true", "yes")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"bad [{section}] value: {exc}") from exc


# ---------------------------------------------------------------------------
# subcommands


def cmd_inject(cfg: dict, out: Path) -> None:
    kg = _load_kg(cfg)
    ds = cfg.get("dataset", {})
    ratio = float(ds.get("noise_ratio", "0.05"))
    mode = ds.get("noise_mode", "uniform")
    if mode not in ("uniform", "slot_aware"):
        raise ConfigError(f"bad noise_mode {mode!r}")
    corpus = inject_noise(kg, ratio, mode, seed=_seed(cfg))
    save_corpus(out, corpus)
    write_metrics(out / "metrics.tsv", {
        "triples_clean": len(kg), "triples_total": len(corpus.graph),
        "errors": corpus.num_errors, "slot_fallbacks": corpus.fallback_count,
    })
    print(f"wrote corpus with {corpus.num_errors} injected errors to {out}")


def cmd_views(cfg: dict, out: Path) -> None:
    kg = _load_kg(cfg)
    metrics = {}
    for name, rule in (("head_share", LinkingRule.head_share()),
                       ("tail_share", LinkingRule.tail_share()),
                       ("any_share", LinkingRule.any_share())):
        tg = build_triple_graph(kg, rule, seed=_seed(cfg))
        dump_edges(out / f"view_{name}.edges", tg)
        metrics[f"{name}_edges"] = tg.edge_count
        metrics[f"{name}_capped_entities"] = tg.stats["capped_entities"]
    write_metrics(out / "metrics.tsv", metrics)
    print(f"wrote edge dumps to {out}")


def cmd_train_caged(cfg: dict, out: Path) -> None:
    corpus = _make_or_load_corpus(cfg, out)
    hyper = _hyper_from(cfg, "caged", caged.CagedHyper, _seed(cfg))
    model = caged.fit(corpus, hyper)
    caged.save_model(out / "caged.ckpt", model)
    write_metrics(out / "metrics.tsv", {
        "final_loss": model.loss_history[-1] if model.loss_history else float("nan"),
        "epochs": hyper.epochs,
        "attention_fallbacks": model.stats["attention_fallbacks"],
    })
    print(f"trained caged model -> {out/'caged.ckpt'}")


def cmd_detect(cfg: dict, out: Path) -> None:
    corpus = _make_or_load_corpus(cfg, out)
    hyper = _hyper_from(cfg, "caged", caged.CagedHyper, _seed(cfg))
    ckpt = out / "caged.ckpt"
    if ckpt.exists():
        model = caged.load_model(corpus, hyper, ckpt)
    else:
        model = caged.fit(corpus, hyper)
        caged.save_model(ckpt, model)
    ranking = caged.confidence_scores(model, corpus)
    ranking.dump(out / "ranking.tsv")
    table = evalkit.detection_table({"caged": ranking})
    (out / "detection_table.txt").write_text(table)
    metrics = {}
    for k in (0.01, 0.02, 0.03, 0.04, 0.05):
        metrics[f"precision@{k:.0%}"] = evalkit.precision_at_k(ranking, k)
        metrics[f"recall@{k:.0%}"] = evalkit.recall_at_k(ranking, k)
    write_metrics(out / "metrics.tsv", metrics)
    print(table)


def cmd_train_aeke(cfg: dict, out: Path) -> None:
    corpus = _make_or_load_corpus(cfg, out)
    attrs = _load_attrs(cfg, corpus.graph)
    hyper = _hyper_from(cfg, "aeke", aeke.AekeHyper, _seed(cfg))
    model = aeke.fit_joint(corpus, attrs, hyper)
    aeke.save_model(out / "aeke.ckpt", model)
    ranking = aeke.confidence_scores(model, corpus)
    ranking.dump(out / "ranking_aeke.tsv")
    table = evalkit.detection_table({"aeke": ranking})
    (out / "detection_table_aeke.txt").write_text(table)
    write_metrics(out / "metrics.tsv", {
        "final_loss": model.loss_history[-1] if model.loss_history else float("nan"),
        "precision@5%": evalkit.precision_at_k(ranking, 0.05),
        "attr_fallbacks": model.stats["attr_fallbacks"],
    })
    print(table)


def cmd_train_noran(cfg: dict, out: Path) -> None:
    kg = _load_kg(cfg)
    frac = float(cfg.get("dataset", {}).get("entity_fraction", "0.1"))
    split = make_inductive_split(kg, frac, seed=_seed(cfg))
    save_split(out / "split.txt", split)
    train_kg = subgraph(kg, split.train)
    hyper = _hyper_from(cfg, "noran", noran.NoranHyper, _seed(cfg))
    model = noran.fit_leim(train_kg, noran.MpLayerSpec(hyper.backbone),
                           hyper.estimator, hyper)
    noran.save_model(out / "noran.ckpt", model)
    write_metrics(out / "metrics.tsv", {
        "final_loss": model.history[-1] if model.history else float("nan"),
        "train_triples": len(train_kg), "test_triples": len(split.test),
        "unseen_entities": len(split.unseen_entities),
    })
    print(f"trained noran model -> {out/'noran.ckpt'}")


def cmd_complete(cfg: dict, out: Path) -> None:
    kg = _load_kg(cfg)
    frac = float(cfg.get("dataset", {}).get("entity_fraction", "0.1"))
    split = make_inductive_split(kg, frac, seed=_seed(cfg))
    train_kg = subgraph(kg, split.train)
    hyper = _hyper_from(cfg, "noran", noran.NoranHyper, _seed(cfg))
    ckpt = out / "noran.ckpt"
    if ckpt.exists():
        model = noran.load_model(train_kg, hyper, ckpt)
    else:
        model = noran.fit_leim(train_kg, noran.MpLayerSpec(hyper.backbone),
                               hyper.estimator, hyper)
        noran.save_model(ckpt, model)
    scorer = lambda h, r, t: noran.score_candidates(model, h, r, t)
    ranks = []
    with open(out / "predictions.tsv", "w", encoding="utf-8") as fh:
        for ti in split.test:
            triple = kg.triples[int(ti)]
            prob = noran.predict_link(model, triple)
            fh.write(f"{triple.head}\t{triple.relation}\t{triple.tail}\t{prob:.6f}\n")
            for slot in ("head", "tail"):
                ranks.append(evalkit.rank_entities(scorer, triple, kg, slot).rank)
    summary = evalkit.mrr_hits(ranks)
    table = evalkit.completion_table({"noran": summary})
    (out / "completion_table.txt").write_text(table)
    write_metrics(out / "metrics.tsv", summary)
    print(table)


def cmd_train_policy(cfg: dict, out: Path) -> None:
    kg = _load_kg(cfg)
    questions = _load_questions(cfg, kg)
    pcfg_raw = cfg.get("promptforge", {})
    cfg_obj = pf.RewardConfig(
        max_steps=int(pcfg_raw.get("max_steps", "5")),
        w_reach=float(pcfg_raw.get("w_reach", "1.0")),
        w_cr=float(pcfg_raw.get("w_cr", "0.5")),
        w_cs=float(pcfg_raw.get("w_cs", "0.5")),
        seed=_seed(cfg))
    episodes = int(pcfg_raw.get("episodes", "500"))
    lr = float(pcfg_raw.get("policy_lr", "0.01"))
    policy = pf.train_policy(kg, questions, cfg_obj, episodes, seed=_seed(cfg), lr=lr)
    ad.save_checkpoint(out / "policy.ckpt", policy.params())
    hist = policy.return_history
    tenth = max(len(hist) // 10, 1)
    write_metrics(out / "metrics.tsv", {
        "episodes": episodes, "skipped_episodes": policy.skipped_episodes,
        "mean_return_first10pct": float(np.mean(hist[:tenth])) if hist else float("nan"),
        "mean_return_last10pct": float(np.mean(hist[-tenth:])) if hist else float("nan"),
    })
    print(f"trained policy -> {out/'policy.ckpt'}")


def cmd_bandit_run(cfg: dict, out: Path) -> None:
    kg = _load_kg(cfg)
    questions = _load_questions(cfg, kg)
    pcfg_raw = cfg.get("promptforge", {})
    cfg_obj = pf.RewardConfig(max_steps=int(pcfg_raw.get("max_steps", "5")),
                              seed=_seed(cfg))
    policy = pf.PolicyNet(kg, cfg_obj, seed=_seed(cfg))
    ckpt = out / "policy.ckpt"
    if ckpt.exists():
        ad.restore_params(policy.params(), ad.load_checkpoint(ckpt))
    import os
    oracle = (pf.HttpAnswerOracle() if os.environ.get("ORACLE_URL")
              else pf.KeywordMockOracle())
    embedder = pf.FeatureHashEmbedder()
    bandit = pf.BanditState(context_dim=embedder.dim,
                            ridge=float(pcfg_raw.get("ridge", "1.0")),
                            explore=float(pcfg_raw.get("explore", "0.5")))
    rounds = int(pcfg_raw.get("rounds", str(len(questions))))
    rng = np.random.default_rng(_seed(cfg))
    rewards, arm_counts = [], np.zeros(bandit.n_arms, dtype=int)
    with open(out / "trace.jsonl", "w", encoding="utf-8") as fh:
        for i in range(rounds):
            q = questions[i % len(questions)]
            reply, trace = pf.answer_question(kg, q, policy, bandit, oracle,
                                              embedder=embedder, rng=rng)
            fh.write(trace.log_line() + "\n")
            arm_counts[trace.arm] += 1
            if trace.reward is not None:
                rewards.append(trace.reward)
    metrics = {"rounds": rounds,
               "accuracy": float(np.mean(rewards)) if rewards else float("nan")}
    for i, (ext, tmpl) in enumerate(pf.ARM_CATALOG):
        metrics[f"pulls_{ext}_{tmpl}"] = int(arm_counts[i])
    write_metrics(out / "metrics.tsv", metrics)
    print(f"bandit accuracy over {rounds} rounds: {metrics['accuracy']:.3f}")


def cmd_eval(cfg: dict, out: Path) -> None:
    ev = cfg.get("eval", {})
    if "ranking" not in ev:
        raise ConfigError("eval needs [eval] ranking = <path to ranking.tsv>")
    path = Path(ev["ranking"])
    if not path.exists():
        raise ConfigError(f"ranking file {path} does not exist")
    ranking = evalkit.load_ranking(path)
    fracs = ev.get("k_fractions", "0.01,0.02,0.03,0.04,0.05")
    ks = [float(x) for x in fracs.split(",")]
    table = evalkit.detection_table({"ranking": ranking}, ks)
    (out / "detection_table.txt").write_text(table)
    metrics = {}
    for k in ks:
        metrics[f"precision@{k:.0%}"] = evalkit.precision_at_k(ranking, k)
        metrics[f"recall@{k:.0%}"] = evalkit.recall_at_k(ranking, k)
    write_metrics(out / "metrics.tsv", metrics)
    print(table)


def gradient_gates(seed: int = 0) -> dict[str, float]:
    """Max relative autodiff error per registered loss, on toy instances."""
    from .kgstore import inject_noise as _inject

    results: dict[str, float] = {}
    kg = synth.planted_translational_kg(12, 3, 18, seed=5)
    corpus = _inject(kg, 0.1, "uniform", seed=2)

    cmodel = caged.CagedModel(corpus.graph, caged.CagedHyper(dim=4, m=3, seed=seed))
    batch = np.arange(10)
    results["caged_joint"] = ad.grad_check(
        lambda: caged.joint_loss(cmodel, batch, np.random.default_rng(42)),
        cmodel.params())

    tc = synth.typed_attribute_corpus(n_entities=14, n_relations=3, n_triples=20,
                                      n_types=2, error_ratio=0.1, seed=3)
    acorpus = LabeledCorpus(tc.kg, tc.labels, 0.1, 3)
    amodel = aeke.AekeModel(tc.kg, tc.attrs, aeke.AekeHyper(dim=4, m=3, seed=seed))
    conf = np.full(len(tc.kg), 0.7)

    def aeke_loss():
        rng = np.random.default_rng(7)
        _, _, l_con = aeke.dual_view_losses(amodel, batch, rng)
        l_emb = aeke.error_aware_margin_loss(amodel, batch, conf, rng)
        return ad.add(l_con, l_emb)

    results["aeke_joint"] = ad.grad_check(aeke_loss, amodel.params())

    nmodel = noran.NoranModel(kg, noran.NoranHyper(dim=4, hidden=6, k=2, seed=seed))
    nbatch = np.array([0, 3, 5, 9])
    results["noran_jsd"] = ad.grad_check(
        lambda: ad.mul(noran.mi_jsd(nmodel, nbatch), -1.0), noran._repr_params(nmodel))
    results["noran_infonce"] = ad.grad_check(
        lambda: ad.mul(noran.mi_infonce(nmodel, nbatch), -1.0),
        noran._repr_params(nmodel))

    grid = synth.grid_kg(4, 4)
    raw = synth.grid_questions(grid, 4, max_distance=2, seed=1)
    questions = [pf.question_from_dict(grid, d) for d in raw]
    policy = pf.PolicyNet(grid, pf.RewardConfig(max_steps=3), seed=seed)
    q = questions[0]
    tv = policy.target_vector(q)

    def reinforce_surrogate():
        rng = np.random.default_rng(11)
        src = sorted(q.source_entities)[0]
        _, terms, _ = pf._rollout_sampled(policy, src, q.target_entities, tv, rng)
        total = terms[0]
        for t in terms[1:]:
            total = ad.add(total, t)
        return ad.mul(total, -0.5)  # fixed advantage

    results["reinforce_surrogate"] = ad.grad_check(reinforce_surrogate, policy.params())
    return results


def cmd_gradcheck(cfg: dict, out: Path) -> None:
    results = gradient_gates(seed=_seed(cfg))
    write_metrics(out / "metrics.tsv", results)
    worst = max(results.values())
    for name, err in sorted(results.items()):
        status = "ok" if err <= 1e-3 else "FAIL"
        print(f"{name}: max relative error {err:.2e} [{status}]")
    if worst > 1e-3:
        raise RuntimeError(f"gradient gate failed: worst error {worst:.2e} > 1e-3")


def cmd_demo(cfg: dict, out: Path) -> None:
    """End-to-end run on the bundled toy assets."""
    seed = _seed(cfg)
    kg = _load_kg(cfg)
    print(f"toy graph: {len(kg)} triples, {kg.num_entities} entities, "
          f"{kg.num_relations} relations")

    corpus = inject_noise(kg, 0.05, "uniform", seed=seed)
    save_corpus(out, corpus)
    hyper = caged.CagedHyper(dim=8, m=6, epochs=8, batch_size=64, seed=seed)
    model = caged.fit(corpus, hyper)
    ranking = caged.confidence_scores(model, corpus)
    ranking.dump(out / "ranking.tsv")
    det_table = evalkit.detection_table({"caged": ranking})
    print(det_table)

    split = make_inductive_split(kg, 0.1, seed=seed)
    train_kg = subgraph(kg, split.train)
    nhyper = noran.NoranHyper(dim=8, hidden=8, k=2, steps=20, batch_size=8, seed=seed)
    nmodel = noran.fit_leim(train_kg, noran.MpLayerSpec("sage"), "jsd", nhyper)
    scorer = lambda h, r, t: noran.score_candidates(nmodel, h, r, t)
    ranks = []
    for ti in split.test[:20]:
        triple = kg.triples[int(ti)]
        for slot in ("head", "tail"):
            ranks.append(evalkit.rank_entities(scorer, triple, kg, slot).rank)
    summary = evalkit.mrr_hits(ranks)
    comp_table = evalkit.completion_table({"noran": summary})
    print(comp_table)

    questions = _load_questions(cfg, kg)
    pcfg = pf.RewardConfig(max_steps=4, seed=seed)
    policy = pf.train_policy(kg, questions, pcfg, episodes=200, seed=seed)
    oracle = pf.KeywordMockOracle()
    embedder = pf.FeatureHashEmbedder()
    bandit = pf.BanditState(context_dim=embedder.dim, explore=0.4)
    rng = np.random.default_rng(seed)
    rewards = []
    with open(out / "trace.jsonl", "w", encoding="utf-8") as fh:
        for i in range(3 * len(questions)):
            q = questions[i % len(questions)]
            _, trace = pf.answer_question(kg, q, policy, bandit, oracle,
                                          embedder=embedder, rng=rng)
            fh.write(trace.log_line() + "\n")
            if trace.reward is not None:
                rewards.append(trace.reward)
    qa_acc = float(np.mean(rewards)) if rewards else float("nan")
    print(f"QA accuracy with bandit arms: {qa_acc:.3f}")

    metrics = {"detect_precision@5%": evalkit.precision_at_k(ranking, 0.05),
               "detect_recall@5%": evalkit.recall_at_k(ranking, 0.05),
               "complete_mrr": summary["mrr"],
               "complete_hits@1": summary["hits@1"],
               "complete_hits@3": summary["hits@3"],
               "complete_hits@10": summary["hits@10"],
               "qa_accuracy": qa_acc}
    write_metrics(out / "metrics.tsv", metrics)
    (out / "detection_table.txt").write_text(det_table)
    (out / "completion_table.txt").write_text(comp_table)


if __name__ == "__main__":
    sys.exit(main())
