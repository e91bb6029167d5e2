"""Genetic search over per-class kernel-group bit-vectors with pruned CM evaluation."""

from __future__ import annotations

import base64
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import composer
from .analysis import GroupingPlan, SensitivityProfile
from .data import LabeledDataset
from .models import TrainedModel


@dataclass
class KernelGenome:
    """One candidate module: a bit per kernel group (1 = group retained).

    fitness is the max weighted fitness over the full CMs the genome joined;
    best_acc2 is its best binary-subtask accuracy, used only as a secondary
    ranking signal for genomes the pruning beam never promoted to a full CM.
    """

    class_id: int
    bits: np.ndarray              # (n_bits,) uint8
    generation: int = 0
    fitness: float | None = None
    best_acc2: float | None = None

    def retained_groups(self) -> frozenset[int]:
        return frozenset(int(i) for i in np.nonzero(self.bits)[0])

    def copy(self) -> "KernelGenome":
        return KernelGenome(self.class_id, self.bits.copy(), self.generation,
                            self.fitness, self.best_acc2)

    def to_json(self, model_hash: str) -> str:
        return json.dumps({
            "model_hash": model_hash,
            "class_id": self.class_id,
            "bits": base64.b64encode(np.packbits(self.bits)).decode(),
            "n_bits": int(len(self.bits)),
            "fitness": self.fitness,
            "generation": self.generation,
        })

    @staticmethod
    def from_json(text: str) -> tuple["KernelGenome", str]:
        d = json.loads(text)
        bits = np.unpackbits(np.frombuffer(base64.b64decode(d["bits"]),
                                           dtype=np.uint8))[: d["n_bits"]]
        return (KernelGenome(d["class_id"], bits.astype(np.uint8),
                             d["generation"], d["fitness"]),
                d["model_hash"])


@dataclass
class GAConfig:
    n_individuals: int = 100      # N_I
    n_parents: int = 50           # N_P
    mutation_prob: float = 0.1    # p_M
    alpha: float = 0.9
    max_generations: int = 200    # T
    n_top: int = 10
    seed: int = 0
    elitism: bool = True
    patience: int = 20

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        # the open interval is the recommended range; the bounds are allowed
        # so degenerate schedules (no mutation / always flip) stay testable
        if not 0 <= self.mutation_prob <= 1:
            raise ValueError("mutation_prob must lie in [0, 1]")
        if self.n_parents > self.n_individuals:
            raise ValueError("n_parents must not exceed n_individuals")
        if self.n_parents < 2:
            raise ValueError("need at least 2 parents for crossover")


def repair_genome(genome: KernelGenome, grouping: GroupingPlan) -> KernelGenome:
    """Re-enable the highest-importance group of any segment left all-zero."""
    for i in range(len(grouping.segments)):
        sl = grouping.segment_bit_slice(i)
        if genome.bits[sl].sum() == 0:
            genome.bits[sl.start] = 1   # group 0 holds the most important kernels
    return genome


def init_population(groupings, sensitivity: SensitivityProfile,
                    cfg: GAConfig) -> list[list[KernelGenome]]:
    """Sensitivity-based initialization: drop 10-50% of groups in sensitive layers,
    50-90% in insensitive ones; a tied segment counts as sensitive if any member is."""
    rng = np.random.default_rng(cfg.seed)
    populations = []
    for class_id, plan in enumerate(groupings):
        pop = []
        for _ in range(cfg.n_individuals):
            bits = np.ones(plan.n_bits, dtype=np.uint8)
            for si, seg in enumerate(plan.segments):
                sens = any(sensitivity.is_sensitive(l) for l in seg.layer_ids)
                r = rng.uniform(0.1, 0.5) if sens else rng.uniform(0.5, 0.9)
                g = len(seg.groups)
                drop = int(r * g)
                if drop:
                    sl = plan.segment_bit_slice(si)
                    pick = rng.choice(g, size=drop, replace=False)
                    bits[sl.start + pick] = 0
            pop.append(repair_genome(KernelGenome(class_id, bits), plan))
        populations.append(pop)
    return populations


def jaccard_distance(a: KernelGenome, b: KernelGenome) -> float:
    """Jaccard distance between retained-group index sets; 0 when both are empty."""
    if len(a.bits) != len(b.bits):
        raise ValueError("genomes have different lengths")
    union = int(np.sum((a.bits | b.bits) != 0))
    if union == 0:
        return 0.0
    inter = int(np.sum((a.bits & b.bits) != 0))
    return (union - inter) / union


def diff_value(genomes) -> float:
    """Average pairwise Jaccard distance; defined as 0 for fewer than 2 modules."""
    n = len(genomes)
    if n < 2:
        return 0.0
    total = sum(jaccard_distance(genomes[i], genomes[j])
                for i in range(n) for j in range(i + 1, n))
    return 2.0 * total / (n * (n - 1))


def fitness(genomes, acc: float, alpha: float = 0.9) -> float:
    """Eq-style weighted fitness of one CM; records it on each member genome (max wins)."""
    value = alpha * acc + (1 - alpha) * diff_value(genomes)
    for g in genomes:
        g.fitness = value if g.fitness is None else max(g.fitness, value)
    return value


def _module_columns(populations, tm, data, groupings) -> list[np.ndarray]:
    """Per class: (N_I, |D|) matrix of each genome's own-class logit, via physical decode.

    Identical bit patterns within a population are decoded once.
    """
    cols = []
    for class_id, pop in enumerate(populations):
        plan = groupings[class_id]
        out = np.empty((len(pop), len(data)))
        cache: dict[bytes, np.ndarray] = {}
        for i, g in enumerate(pop):
            key = g.bits.tobytes()
            if key not in cache:
                retained = plan.decode_bits(g.bits, tm.spec.kernel_slice)
                module = composer.decode(tm, retained, class_id=class_id)
                cache[key] = module.logits(data.images)[:, class_id]
            out[i] = cache[key]
        cols.append(out)
    return cols


def cm_accuracy(genomes, tm: TrainedModel, data: LabeledDataset, groupings) -> float:
    """Accuracy of the CM built from one genome per class (module n contributes logit n)."""
    if len(genomes) != tm.spec.n_classes:
        raise ValueError("need exactly one genome per class")
    cols = []
    for g in genomes:
        retained = groupings[g.class_id].decode_bits(g.bits, tm.spec.kernel_slice)
        module = composer.decode(tm, retained, class_id=g.class_id)
        cols.append(module.logits(data.images)[:, g.class_id])
    stacked = np.stack(cols, axis=1)
    return float(np.mean(np.argmax(stacked, axis=1) == data.labels))


def _jd_matrix(pop_a, pop_b) -> np.ndarray:
    a = np.stack([g.bits for g in pop_a]).astype(np.float64)
    b = np.stack([g.bits for g in pop_b]).astype(np.float64)
    inter = a @ b.T
    union = a.sum(1)[:, None] + b.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore"):
        jd = np.where(union > 0, (union - inter) / np.maximum(union, 1), 0.0)
    return jd


@dataclass
class BestCM:
    fitness: float
    acc: float
    diff: float
    genome_indices: tuple[int, ...]


@dataclass
class PruneEvalResult:
    cm_evaluations: int
    best: BestCM
    n_full_candidates: int = 0


def class_pairs(n_classes: int) -> list[tuple[int, int]]:
    """Fixed binary subtasks (0,1),(2,3),...; odd N repeats the last class's subtask."""
    pairs = [(c, c + 1) for c in range(0, n_classes - 1, 2)]
    if n_classes % 2:
        pairs.append((n_classes - 2, n_classes - 1))
    return pairs


def pruned_evaluation(populations, tm: TrainedModel, data: LabeledDataset,
                      cfg: GAConfig, groupings) -> PruneEvalResult:
    """Beam-pruned fitness assignment.

    Every 2-module CM per fixed class pair is evaluated on that pair's samples;
    the top n_top per pair are merged pair by pair, keeping n_top partial CMs,
    into n_top^2 full CM(N) candidates evaluated on the full dataset. Fitness
    (the max over the full CMs a genome joined) goes to beam survivors; every
    genome additionally records its best binary-subtask accuracy, which ranks
    the genomes the beam never promoted.
    """
    n = tm.spec.n_classes
    labels = data.labels
    cols = _module_columns(populations, tm, data, groupings)
    evaluations = 0
    pair_list = class_pairs(n)

    beams = []   # per pair: list of ((i, j), acc) sorted by descending acc
    pair_fit2 = []
    for a, b in pair_list:
        mask = (labels == a) | (labels == b)
        la = cols[a][:, mask]
        lb = cols[b][:, mask]
        target_b = labels[mask] == b
        pred_b = lb[None, :, :] > la[:, None, :]          # argmax ties resolve to class a
        acc = (pred_b == target_b[None, None, :]).mean(axis=2)
        evaluations += acc.size
        jd = _jd_matrix(populations[a], populations[b])
        pair_fit2.append((acc, jd))
        for i, g in enumerate(populations[a]):
            v = float(acc[i].max())
            g.best_acc2 = v if g.best_acc2 is None else max(g.best_acc2, v)
        for j, g in enumerate(populations[b]):
            v = float(acc[:, j].max())
            g.best_acc2 = v if g.best_acc2 is None else max(g.best_acc2, v)
        # rank by the search objective's pair surrogate so exact accuracy ties
        # (common in degenerate populations) resolve toward diverse pairs
        key = cfg.alpha * acc + (1 - cfg.alpha) * jd
        flat = np.argsort(-key, axis=None, kind="stable")[: min(cfg.n_top, acc.size)]
        beams.append([(np.unravel_index(f, acc.shape), float(acc.flat[f])) for f in flat])

    if len(pair_list) == 1:
        # two-class task: the pair grid IS the exhaustive set of full CMs
        acc, jd = pair_fit2[0]
        fit2 = cfg.alpha * acc + (1 - cfg.alpha) * jd
        for i, g in enumerate(populations[0]):
            g.fitness = float(fit2[i].max())
        for j, g in enumerate(populations[1]):
            g.fitness = float(fit2[:, j].max())
        i, j = np.unravel_index(int(np.argmax(fit2)), fit2.shape)
        best = BestCM(fitness=float(fit2[i, j]), acc=float(acc[i, j]),
                      diff=float(jd[i, j]), genome_indices=(int(i), int(j)))
        return PruneEvalResult(cm_evaluations=evaluations, best=best,
                               n_full_candidates=acc.size)

    a0, b0 = pair_list[0]
    partials = [({a0: int(ij[0]), b0: int(ij[1])}, acc2) for (ij, acc2) in beams[0]]
    for p_idx in range(1, len(pair_list)):
        a, b = pair_list[p_idx]
        merged = []
        for assign, _ in partials:
            for (ij, _acc2) in beams[p_idx]:
                new = dict(assign)
                new.setdefault(a, int(ij[0]))
                new.setdefault(b, int(ij[1]))
                classes = sorted(new)
                mask = np.isin(labels, classes)
                stacked = np.stack([cols[c][new[c]][mask] for c in classes], axis=1)
                pred = np.array(classes)[np.argmax(stacked, axis=1)]
                acc_k = float(np.mean(pred == labels[mask]))
                evaluations += 1
                merged.append((new, acc_k))
        merged.sort(key=lambda t: -t[1])
        is_last = p_idx == len(pair_list) - 1
        partials = merged if is_last else merged[: cfg.n_top]

    best = None
    for assign, acc_full in partials:
        genomes = [populations[c][assign[c]] for c in range(n)]
        value = fitness(genomes, acc_full, cfg.alpha)
        if best is None or value > best.fitness:
            best = BestCM(fitness=value, acc=acc_full, diff=diff_value(genomes),
                          genome_indices=tuple(assign[c] for c in range(n)))
    return PruneEvalResult(cm_evaluations=evaluations, best=best,
                           n_full_candidates=len(partials))


def _rank_key(genome: KernelGenome):
    """Full-CM fitness dominates; binary-subtask accuracy breaks ties below it."""
    return (-1.0 if genome.fitness is None else genome.fitness,
            -1.0 if genome.best_acc2 is None else genome.best_acc2)


def evolve(populations, cfg: GAConfig, groupings, rng=None) -> list[list[KernelGenome]]:
    """Selection, single-point crossover, and per-bit mutation, per class."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    next_pops = []
    for class_id, pop in enumerate(populations):
        plan = groupings[class_id]
        ranked = sorted(pop, key=_rank_key, reverse=True)
        parents = ranked[: cfg.n_parents]
        target = cfg.n_individuals - (1 if cfg.elitism else 0)
        children: list[np.ndarray] = []
        while len(children) < target:
            i, j = rng.integers(0, len(parents), size=2)
            pa, pb = parents[i].bits, parents[j].bits
            point = int(rng.integers(1, len(pa))) if len(pa) > 1 else 1
            children.append(np.concatenate([pa[:point], pb[point:]]))
            if len(children) < target:
                children.append(np.concatenate([pb[:point], pa[point:]]))
        gen = parents[0].generation + 1
        new_pop = []
        if cfg.elitism:
            elite = parents[0].copy()
            elite.generation = gen
            new_pop.append(elite)
        for bits in children:
            if cfg.mutation_prob > 0:
                flips = rng.random(len(bits)) < cfg.mutation_prob
                bits = bits ^ flips.astype(np.uint8)
            child = KernelGenome(class_id, bits.astype(np.uint8), generation=gen)
            new_pop.append(repair_genome(child, plan))
        next_pops.append(new_pop)
    return next_pops


@dataclass
class SearchResult:
    best_genomes: list[KernelGenome]
    best_fitness: float
    best_acc: float
    best_diff: float
    log: list[dict] = field(default_factory=list)
    status: str = "converged"
    generations_run: int = 0


def search(tm: TrainedModel, data: LabeledDataset, groupings,
           sensitivity: SensitivityProfile, cfg: GAConfig,
           time_budget_s: float | None = None) -> SearchResult:
    """Run the generational loop with early stopping on stale best fitness."""
    model_hash = tm.model_hash()
    for plan in groupings:
        if plan.model_hash != model_hash:
            raise ValueError("grouping plan was built for a different model")
    if sensitivity.model_hash != model_hash:
        raise ValueError("sensitivity profile was built for a different model")

    rng = np.random.default_rng(cfg.seed)
    populations = init_population(groupings, sensitivity, cfg)
    best: BestCM | None = None
    best_genomes = None
    log = []
    stale = 0
    status = "converged"
    started = time.monotonic()
    gens = 0
    for gen in range(cfg.max_generations):
        result = pruned_evaluation(populations, tm, data, cfg, groupings)
        gens = gen + 1
        improved = best is None or result.best.fitness > best.fitness
        if improved:
            best = result.best
            best_genomes = [populations[c][best.genome_indices[c]].copy()
                            for c in range(tm.spec.n_classes)]
            stale = 0
        else:
            stale += 1
        log.append({"generation": gen, "best_fitness": best.fitness,
                    "best_acc": best.acc, "best_diff": best.diff,
                    "cm_evaluations": result.cm_evaluations})
        if stale >= cfg.patience:
            break
        if time_budget_s is not None and time.monotonic() - started > time_budget_s:
            status = "time_budget_exceeded"
            break
        if gen < cfg.max_generations - 1:
            populations = evolve(populations, cfg, groupings, rng)
    return SearchResult(best_genomes=best_genomes, best_fitness=best.fitness,
                        best_acc=best.acc, best_diff=best.diff, log=log,
                        status=status, generations_run=gens)
