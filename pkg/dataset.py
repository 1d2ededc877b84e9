from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import torch

from diff import DTYPE

AdjacencyKind = Literal["sym_selfloop", "rw_noselfloop"]
OodSetting = Literal["last", "first", "random"]


def _require_pandas():
    try:
        import pandas as pd  # type: ignore
    except ImportError as exc:  # pragma: no cover
        raise SystemExit(
            "Dipendenza mancante: pandas.\n"
            "Installa con: pip install pandas\n"
            f"Dettagli: {exc}"
        ) from exc
    return pd


def _require_networkx():
    try:
        import networkx as nx  # type: ignore
    except ImportError as exc:  # pragma: no cover
        raise SystemExit(
            "Dipendenza mancante: networkx.\n"
            "Installa con: pip install networkx\n"
            f"Dettagli: {exc}"
        ) from exc
    return nx


def canonical_edges(src: torch.Tensor, dst: torch.Tensor, num_nodes: int) -> tuple[torch.Tensor, int]:
    """
    Rende non orientati e deduplicati gli archi (src, dst).

    Restituisce edge_index 2xE con entrambe le direzioni, ordinato per (src, dst),
    e il numero di self-loop scartati.
    """
    src = src.to(torch.long).reshape(-1)
    dst = dst.to(torch.long).reshape(-1)
    if src.numel() != dst.numel():
        raise ValueError("src e dst devono avere la stessa lunghezza")
    if src.numel() and (int(src.min()) < 0 or int(dst.min()) < 0 or int(src.max()) >= num_nodes or int(dst.max()) >= num_nodes):
        raise ValueError(f"Indice di nodo fuori range [0, {num_nodes})")

    loops = src == dst
    n_loops = int(loops.sum())
    src, dst = src[~loops], dst[~loops]

    both_src = torch.cat([src, dst])
    both_dst = torch.cat([dst, src])
    keys = torch.unique(both_src * num_nodes + both_dst)  # ordinate
    edge_index = torch.stack([keys // num_nodes, keys % num_nodes])
    return edge_index, n_loops


@dataclass(frozen=True)
class Graph:
    """
    Grafo non orientato con feature dense e label per nodo (-1 = non etichettato).

    edge_index contiene entrambe le direzioni di ogni arco, senza self-loop.
    """

    features: torch.Tensor
    edge_index: torch.Tensor
    labels: torch.Tensor
    num_classes: int

    def __post_init__(self):
        if self.features.dim() != 2:
            raise ValueError("features deve essere una matrice N x F")
        n = int(self.features.shape[0])
        if self.labels.shape != (n,):
            raise ValueError(f"labels deve avere shape ({n},), ricevuto {tuple(self.labels.shape)}")
        if self.edge_index.dim() != 2 or self.edge_index.shape[0] != 2:
            raise ValueError("edge_index deve avere shape 2 x E")
        if int(self.num_classes) <= 0:
            raise ValueError("num_classes deve essere > 0")

        ei = self.edge_index
        if ei.numel():
            if int(ei.min()) < 0 or int(ei.max()) >= n:
                raise ValueError(f"edge_index con indici fuori range [0, {n})")
            if bool((ei[0] == ei[1]).any()):
                raise ValueError("edge_index contiene self-loop")
            fwd = torch.unique(ei[0] * n + ei[1])
            bwd = torch.unique(ei[1] * n + ei[0])
            if fwd.numel() != ei.shape[1] or not torch.equal(fwd, bwd):
                raise ValueError("edge_index deve essere simmetrico e senza duplicati")

        labeled = self.labels[self.labels >= 0]
        if bool((self.labels < -1).any()) or (labeled.numel() and int(labeled.max()) >= int(self.num_classes)):
            raise ValueError(f"labels fuori range: attesi -1 oppure [0, {int(self.num_classes)})")

    @classmethod
    def from_edges(
        cls,
        features: torch.Tensor,
        src: torch.Tensor,
        dst: torch.Tensor,
        labels: torch.Tensor,
        num_classes: int,
    ) -> "Graph":
        features = torch.as_tensor(features, dtype=DTYPE)
        edge_index, _ = canonical_edges(torch.as_tensor(src), torch.as_tensor(dst), int(features.shape[0]))
        return cls(features=features, edge_index=edge_index, labels=torch.as_tensor(labels, dtype=torch.long), num_classes=int(num_classes))

    @property
    def num_nodes(self) -> int:
        return int(self.features.shape[0])

    @property
    def num_features(self) -> int:
        return int(self.features.shape[1])

    @property
    def num_edges(self) -> int:
        return int(self.edge_index.shape[1]) // 2

    def degrees(self) -> torch.Tensor:
        return torch.bincount(self.edge_index[0], minlength=self.num_nodes).to(DTYPE)

    def adjacency(self) -> torch.Tensor:
        values = torch.ones(self.edge_index.shape[1], dtype=DTYPE)
        return torch.sparse_coo_tensor(self.edge_index, values, (self.num_nodes, self.num_nodes)).coalesce()

    def labeled_mask(self) -> torch.Tensor:
        return self.labels >= 0


@dataclass(frozen=True)
class NormalizedAdjacency:
    kind: AdjacencyKind
    matrix: torch.Tensor

    def dense(self) -> torch.Tensor:
        return self.matrix.to_dense()


def normalize(graph: Graph, kind: AdjacencyKind) -> NormalizedAdjacency:
    """
    sym_selfloop:  D̂^{-1/2} (A + I) D̂^{-1/2}, con D̂ = D + I (un nodo isolato ha peso 1 su se stesso)
    rw_noselfloop: D^{-1} A, riga nulla per i nodi isolati
    """
    n = graph.num_nodes
    src, dst = graph.edge_index[0], graph.edge_index[1]
    deg = graph.degrees()

    if kind == "sym_selfloop":
        deg_hat = deg + 1.0
        inv_sqrt = deg_hat.rsqrt()
        loop = torch.arange(n)
        rows = torch.cat([src, loop])
        cols = torch.cat([dst, loop])
        values = torch.cat([inv_sqrt[src] * inv_sqrt[dst], 1.0 / deg_hat])
    elif kind == "rw_noselfloop":
        rows, cols = src, dst
        values = 1.0 / deg[src]
    else:
        raise ValueError(f"kind non supportato: {kind!r} (attesi 'sym_selfloop' | 'rw_noselfloop')")

    matrix = torch.sparse_coo_tensor(torch.stack([rows, cols]), values.to(DTYPE), (n, n)).coalesce()
    return NormalizedAdjacency(kind=kind, matrix=matrix)


# ---------------------------------------------------------------------------
# split Left-Out-Classes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    train_idx: torch.Tensor
    val_idx: torch.Tensor
    test_idx: torch.Tensor
    ood_classes: tuple[int, ...] = ()

    def __post_init__(self):
        sets = [set(self.train_idx.tolist()), set(self.val_idx.tolist()), set(self.test_idx.tolist())]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ValueError("train/val/test devono essere disgiunti")

    def to_dict(self) -> dict[str, list[int]]:
        return {
            "train_idx": [int(i) for i in self.train_idx.tolist()],
            "val_idx": [int(i) for i in self.val_idx.tolist()],
            "test_idx": [int(i) for i in self.test_idx.tolist()],
            "ood_classes": [int(c) for c in self.ood_classes],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SplitSpec":
        missing = {"train_idx", "val_idx", "test_idx"} - set(payload)
        if missing:
            raise ValueError(f"splits.json senza chiavi: {sorted(missing)}")
        return cls(
            train_idx=torch.tensor(payload["train_idx"], dtype=torch.long),
            val_idx=torch.tensor(payload["val_idx"], dtype=torch.long),
            test_idx=torch.tensor(payload["test_idx"], dtype=torch.long),
            ood_classes=tuple(int(c) for c in payload.get("ood_classes", [])),
        )

    def check_against(self, graph: Graph) -> None:
        n = graph.num_nodes
        for name in ("train_idx", "val_idx", "test_idx"):
            idx = getattr(self, name)
            if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= n):
                raise ValueError(f"{name} con indici fuori range [0, {n})")
        if any(not (0 <= c < graph.num_classes) for c in self.ood_classes):
            raise ValueError(f"ood_classes fuori range [0, {graph.num_classes})")
        ood = torch.tensor(self.ood_classes, dtype=torch.long)
        for name in ("train_idx", "val_idx"):
            if bool(torch.isin(graph.labels[getattr(self, name)], ood).any()):
                raise ValueError(f"{name} contiene nodi di classi OOD {list(self.ood_classes)}")


def select_ood_classes(num_classes: int, n_ood: int, setting: OodSetting = "last", seed: int = 0) -> tuple[int, ...]:
    """Classi da lasciare fuori dal training: ultime, prime o casuali."""
    if not (0 <= int(n_ood) < int(num_classes)):
        raise ValueError(f"n_ood deve essere in [0, {int(num_classes)})")
    if setting == "last":
        chosen = range(int(num_classes) - int(n_ood), int(num_classes))
    elif setting == "first":
        chosen = range(int(n_ood))
    elif setting == "random":
        rng = np.random.default_rng(seed)
        chosen = rng.choice(int(num_classes), size=int(n_ood), replace=False).tolist()
    else:
        raise ValueError(f"setting non supportato: {setting!r} (attesi last | first | random)")
    return tuple(sorted(int(c) for c in chosen))


def make_loc_split(
    graph: Graph,
    ood_classes: Sequence[int] = (),
    *,
    per_class_train: int = 20,
    val_fraction: float = 1.0,
    test_fraction: float = 0.2,
    seed: int = 0,
) -> SplitSpec:
    """
    Split Left-Out-Classes.

    train: per_class_train nodi per ogni classe ID; test: test_fraction * N nodi
    etichettati (ID e OOD) fra i rimanenti; val: val_fraction dei nodi ID rimasti.
    """
    ood = tuple(sorted({int(c) for c in ood_classes}))
    if any(not (0 <= c < graph.num_classes) for c in ood):
        raise ValueError(f"ood_classes fuori range [0, {graph.num_classes})")
    if len(ood) >= graph.num_classes:
        raise ValueError("Serve almeno una classe in-distribution.")
    if int(per_class_train) <= 0:
        raise ValueError("per_class_train deve essere > 0")
    if not (0.0 < float(test_fraction) < 1.0):
        raise ValueError("test_fraction deve essere in (0,1).")
    if not (0.0 <= float(val_fraction) <= 1.0):
        raise ValueError("val_fraction deve essere in [0,1].")

    rng = np.random.default_rng(seed)
    labels = graph.labels.numpy()
    id_classes = [c for c in range(graph.num_classes) if c not in ood]

    train_parts: list[np.ndarray] = []
    for c in id_classes:
        nodes = np.flatnonzero(labels == c)
        if nodes.size < int(per_class_train):
            raise ValueError(
                f"Classe {c}: solo {nodes.size} nodi etichettati, servono almeno per_class_train={int(per_class_train)}."
            )
        train_parts.append(rng.choice(nodes, size=int(per_class_train), replace=False))
    train = np.sort(np.concatenate(train_parts))

    rest = np.setdiff1d(np.flatnonzero(labels >= 0), train)
    n_test = min(int(round(float(test_fraction) * graph.num_nodes)), rest.size)
    test = np.sort(rng.choice(rest, size=n_test, replace=False)) if n_test else np.empty(0, dtype=np.int64)

    val_pool = np.setdiff1d(rest, test)
    val_pool = val_pool[~np.isin(labels[val_pool], ood)]
    n_val = int(np.floor(float(val_fraction) * val_pool.size))
    val = np.sort(rng.choice(val_pool, size=n_val, replace=False)) if n_val else np.empty(0, dtype=np.int64)

    return SplitSpec(
        train_idx=torch.as_tensor(train, dtype=torch.long),
        val_idx=torch.as_tensor(val, dtype=torch.long),
        test_idx=torch.as_tensor(test, dtype=torch.long),
        ood_classes=ood,
    )


def save_split(split: SplitSpec, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(split.to_dict(), sort_keys=True), encoding="utf-8")
    return path


def load_split(path: str | Path) -> SplitSpec:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"splits.json non trovato: {path}")
    return SplitSpec.from_dict(json.loads(path.read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# formato su disco: edges.tsv, features.csv, labels.csv, meta.json
# ---------------------------------------------------------------------------


def _read_numeric_csv(path: Path, *, sep: str, what: str, allow_empty: bool = False):
    pd = _require_pandas()
    if not path.exists():
        raise FileNotFoundError(f"{what} non trovato: {path}")
    try:
        df = pd.read_csv(path, sep=sep, header=None, dtype=str, skip_blank_lines=True)
    except pd.errors.EmptyDataError:
        if allow_empty:
            return None
        raise ValueError(f"{what} vuoto: {path}") from None
    numeric = df.apply(lambda col: pd.to_numeric(col.str.strip(), errors="coerce"))
    if numeric.isna().any().any():
        row, col = np.argwhere(numeric.isna().to_numpy())[0]
        raise ValueError(f"{what}: valore non numerico {df.iat[row, col]!r} alla riga {row + 1}, colonna {col + 1} ({path})")
    return numeric


def load_graph(dir_path: str | Path) -> Graph:
    root = Path(dir_path)
    if not root.is_dir():
        raise FileNotFoundError(f"Cartella dataset non trovata: {root}")

    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"meta.json non trovato: {meta_path}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    missing = {"num_nodes", "num_features", "num_classes"} - set(meta)
    if missing:
        raise ValueError(f"meta.json senza chiavi: {sorted(missing)} ({meta_path})")
    n, f, c = int(meta["num_nodes"]), int(meta["num_features"]), int(meta["num_classes"])

    feats = _read_numeric_csv(root / "features.csv", sep=",", what="features.csv")
    if feats.shape != (n, f):
        raise ValueError(f"features.csv: attese {n} righe x {f} colonne, trovate {feats.shape[0]} x {feats.shape[1]}")

    labels_df = _read_numeric_csv(root / "labels.csv", sep=",", what="labels.csv")
    if labels_df.shape != (n, 1):
        raise ValueError(f"labels.csv: attese {n} righe x 1 colonna, trovate {labels_df.shape[0]} x {labels_df.shape[1]}")
    labels_np = labels_df.iloc[:, 0].to_numpy()
    if not np.all(labels_np == np.round(labels_np)):
        raise ValueError("labels.csv: le label devono essere intere")
    labels = torch.as_tensor(labels_np.astype(np.int64))
    if bool(((labels < -1) | (labels >= c)).any()):
        raise ValueError(f"labels.csv: label fuori range, attesi -1 oppure [0, {c})")

    edges = _read_numeric_csv(root / "edges.tsv", sep="\t", what="edges.tsv", allow_empty=True)
    if edges is None:
        src = dst = torch.empty(0, dtype=torch.long)
    else:
        if edges.shape[1] != 2:
            raise ValueError(f"edges.tsv: attese 2 colonne, trovate {edges.shape[1]}")
        e = edges.to_numpy()
        if not np.all(e == np.round(e)):
            raise ValueError("edges.tsv: gli indici dei nodi devono essere interi")
        e = e.astype(np.int64)
        if e.size and (e.min() < 0 or e.max() >= n):
            raise ValueError(f"edges.tsv: indice di nodo fuori range [0, {n})")
        src, dst = torch.as_tensor(e[:, 0]), torch.as_tensor(e[:, 1])

    edge_index, n_loops = canonical_edges(src, dst, n)
    if n_loops:
        print(f"Nota: scartati {n_loops} self-loop da {root / 'edges.tsv'}")

    return Graph(
        features=torch.as_tensor(feats.to_numpy(), dtype=DTYPE),
        edge_index=edge_index,
        labels=labels,
        num_classes=c,
    )


def save_graph(graph: Graph, dir_path: str | Path) -> Path:
    pd = _require_pandas()
    root = Path(dir_path)
    root.mkdir(parents=True, exist_ok=True)

    ei = graph.edge_index
    once = ei[:, ei[0] < ei[1]]
    pd.DataFrame(once.t().numpy()).to_csv(root / "edges.tsv", sep="\t", header=False, index=False)
    pd.DataFrame(graph.features.numpy()).to_csv(root / "features.csv", header=False, index=False, float_format="%.17g")
    pd.DataFrame(graph.labels.numpy()).to_csv(root / "labels.csv", header=False, index=False)
    meta = {"num_nodes": graph.num_nodes, "num_features": graph.num_features, "num_classes": int(graph.num_classes)}
    (root / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2), encoding="utf-8")
    return root


# ---------------------------------------------------------------------------
# mondo gaussiano e CSBM sintetico
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianSpec:
    """Classi -1, +1 e 0 (OOD) con medie -mu, +mu, 0 e covarianza comune sigma."""

    dim: int
    mu: torch.Tensor
    sigma: torch.Tensor

    def __post_init__(self):
        d = int(self.dim)
        if d <= 0:
            raise ValueError("dim deve essere > 0")
        if tuple(self.mu.shape) != (d,):
            raise ValueError(f"mu deve avere shape ({d},)")
        if tuple(self.sigma.shape) != (d, d):
            raise ValueError(f"sigma deve avere shape ({d}, {d})")
        if not torch.allclose(self.sigma, self.sigma.T, atol=1e-12, rtol=0.0):
            raise ValueError("sigma deve essere simmetrica")
        _, info = torch.linalg.cholesky_ex(self.sigma.to(DTYPE))
        if int(info) != 0:
            raise ValueError("sigma non è definita positiva (Cholesky fallita)")

    @classmethod
    def isotropic(cls, dim: int, mu_norm: float) -> "GaussianSpec":
        d = int(dim)
        mu = torch.full((d,), float(mu_norm) / float(np.sqrt(d)), dtype=DTYPE)
        return cls(dim=d, mu=mu, sigma=torch.eye(d, dtype=DTYPE))

    def cholesky(self) -> torch.Tensor:
        return torch.linalg.cholesky(self.sigma.to(DTYPE))

    def sigma_inv_mu(self) -> torch.Tensor:
        return torch.cholesky_solve(self.mu.to(DTYPE).unsqueeze(1), self.cholesky()).squeeze(1)

    def snr(self) -> float:
        """mu^T sigma^{-1} mu."""
        return float(self.mu.to(DTYPE) @ self.sigma_inv_mu())


def _sample_blocks(means: torch.Tensor, sizes: Sequence[int], chol: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    blocks = []
    for mean, size in zip(means, sizes):
        eps = torch.randn(int(size), chol.shape[0], generator=generator, dtype=DTYPE)
        blocks.append(mean.unsqueeze(0) + eps @ chol.T)
    return torch.cat(blocks, dim=0)


def sample_gaussian_world(
    spec: GaussianSpec,
    n_per_class: int,
    *,
    include_ood: bool = True,
    seed: int = 0,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Righe da N(-mu, S), N(+mu, S) e, se include_ood, N(0, S); label -1, +1, 0 in quest'ordine."""
    if int(n_per_class) <= 0:
        raise ValueError("n_per_class deve essere > 0")
    gen = torch.Generator().manual_seed(int(seed))
    mu = spec.mu.to(DTYPE)
    means = [-mu, mu] + ([torch.zeros_like(mu)] if include_ood else [])
    tags = [-1, 1] + ([0] if include_ood else [])
    sizes = [int(n_per_class)] * len(means)
    z = _sample_blocks(torch.stack(means), sizes, spec.cholesky(), gen)
    labels = torch.repeat_interleave(torch.tensor(tags, dtype=torch.long), torch.tensor(sizes))
    return z, labels


def generate_csbm_graph(
    spec: GaussianSpec,
    n_per_class: int,
    p_in: float,
    p_out: float,
    ood_classes: Sequence[int] | None = None,
    *,
    seed: int = 0,
    num_id_classes: int = 2,
    ood_size: int | None = None,
) -> Graph:
    """
    Contextual SBM: feature gaussiane + archi indipendenti (p_in dentro la classe, p_out fra classi).

    Con due classi ID il mondo è quello di sample_gaussian_world (-1 -> 0, +1 -> 1, 0 -> 2).
    Con K > 2 classi ID le medie sono ||mu|| * e_c. Il blocco OOD, centrato nell'origine,
    prende l'indice in ood_classes (default K); ood_classes=() non genera nodi OOD.
    """
    nx = _require_networkx()
    if not (0.0 <= float(p_out) <= float(p_in) <= 1.0):
        raise ValueError("Richiesto 0 <= p_out <= p_in <= 1.")
    k = int(num_id_classes)
    if k < 2:
        raise ValueError("num_id_classes deve essere >= 2")

    ood = (k,) if ood_classes is None else tuple(int(c) for c in ood_classes)
    if len(ood) > 1 or any(not (0 <= c <= k) for c in ood):
        raise ValueError(f"ood_classes: al più una classe OOD con indice in [0, {k}]")
    num_classes = k + len(ood)

    mu = spec.mu.to(DTYPE)
    if k == 2:
        id_means = [-mu, mu]
    else:
        if spec.dim < k:
            raise ValueError(f"Con {k} classi ID serve dim >= {k}")
        norm = float(torch.linalg.vector_norm(mu))
        id_means = [norm * torch.eye(spec.dim, dtype=DTYPE)[c] for c in range(k)]

    means: list[torch.Tensor] = []
    id_iter = iter(id_means)
    for c in range(num_classes):
        means.append(torch.zeros_like(mu) if c in ood else next(id_iter))
    n_ood = int(ood_size) if ood_size is not None else int(n_per_class)
    sizes = [n_ood if c in ood else int(n_per_class) for c in range(num_classes)]

    gen = torch.Generator().manual_seed(int(seed))
    features = _sample_blocks(torch.stack(means), sizes, spec.cholesky(), gen)
    labels = torch.repeat_interleave(torch.arange(num_classes), torch.tensor(sizes))

    probs = [[float(p_in) if i == j else float(p_out) for j in range(num_classes)] for i in range(num_classes)]
    sbm = nx.stochastic_block_model(sizes, probs, seed=int(seed), directed=False, selfloops=False)
    edges = np.array(sorted(sbm.edges()), dtype=np.int64).reshape(-1, 2)
    return Graph.from_edges(features, torch.as_tensor(edges[:, 0]), torch.as_tensor(edges[:, 1]), labels, num_classes)
