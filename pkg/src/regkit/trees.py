"""Exact symbolic algebra of decorated trees and forests.

A tree node carries a monomial decoration k in N^d, an optional noise mark,
and a multiset of planted subtrees, each hanging from an edge decorated by
n in N^d.  The planting operator I_n raises degree by 2 - |n|; the noise
mark contributes a configurable real degree (kept as an exact Fraction so
degree comparisons and truncations have no ties).

Two graded spaces are built from these symbols:

* the tree span: symbols used for local expansions;
* the forest algebra: commutative products X^l * prod I_{n_i}(tau_i) of
  positive-degree planted symbols, which carries the splitting maps, the
  counit and the antipode of a Hopf algebra.

All coefficients are ``fractions.Fraction``; every identity test downstream
is exact equality, never a float tolerance.

Trees and forests are immutable and hashable; the basis generator is
deterministic, so serialized dumps are stable goldens.
"""

from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache


class SubcriticalityError(RuntimeError):
    """Basis closure failed to stabilize below the degree cutoff."""


# -- symbols -----------------------------------------------------------------

@dataclass(frozen=True)
class Tree:
    """Decorated tree: root monomial k, optional noise mark, planted children."""

    k: tuple[int, ...]
    noise: bool
    children: tuple[tuple[tuple[int, ...], "Tree"], ...]

    def is_unit(self) -> bool:
        return not self.noise and not self.children and not any(self.k)

    def noise_count(self) -> int:
        return int(self.noise) + sum(c.noise_count() for _, c in self.children)


@dataclass(frozen=True)
class Forest:
    """Element of the positive algebra: X^k times planted factors I_n(tau)."""

    k: tuple[int, ...]
    factors: tuple[tuple[tuple[int, ...], Tree], ...]

    def is_unit(self) -> bool:
        return not self.factors and not any(self.k)


def _zero(d: int) -> tuple[int, ...]:
    return (0,) * d


def _add(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    return tuple(x + y for x, y in zip(a, b))


def _factorial(k: tuple[int, ...]) -> int:
    out = 1
    for v in k:
        out *= math.factorial(v)
    return out


def _binomial(n: tuple[int, ...], ell: tuple[int, ...]) -> int:
    out = 1
    for a, b in zip(n, ell):
        out *= math.comb(a, b)
    return out


def multiindices(d: int, total: int) -> list[tuple[int, ...]]:
    """All k in N^d with |k| = total."""
    if d == 1:
        return [(total,)]
    return [(i, total - i) for i in range(total + 1)]


def multiindices_below(d: int, bound: Fraction) -> list[tuple[int, ...]]:
    """All k in N^d with |k| < bound."""
    out = []
    total = 0
    while Fraction(total) < bound:
        out.extend(multiindices(d, total))
        total += 1
    return out


# -- linear combinations -----------------------------------------------------

class LinComb:
    """Finite linear combination with exact rational coefficients.

    Terms are any hashable symbols; tensors are plain tuples of symbols.
    Zero coefficients are never stored.
    """

    __slots__ = ("terms",)

    def __init__(self, terms=None):
        self.terms = {}
        if terms:
            for t, c in terms.items() if isinstance(terms, dict) else terms:
                c = Fraction(c)
                if c:
                    c0 = self.terms.get(t, 0) + c
                    if c0:
                        self.terms[t] = c0
                    else:
                        self.terms.pop(t, None)

    @classmethod
    def single(cls, term, coeff=1) -> "LinComb":
        lc = cls()
        c = Fraction(coeff)
        if c:
            lc.terms[term] = c
        return lc

    @classmethod
    def zero(cls) -> "LinComb":
        return cls()

    def add_term(self, term, coeff):
        c = self.terms.get(term, 0) + Fraction(coeff)
        if c:
            self.terms[term] = c
        else:
            self.terms.pop(term, None)

    def __add__(self, other: "LinComb") -> "LinComb":
        out = LinComb(dict(self.terms))
        for t, c in other.terms.items():
            out.add_term(t, c)
        return out

    def __sub__(self, other: "LinComb") -> "LinComb":
        out = LinComb(dict(self.terms))
        for t, c in other.terms.items():
            out.add_term(t, -c)
        return out

    def scale(self, c) -> "LinComb":
        c = Fraction(c)
        return LinComb({t: v * c for t, v in self.terms.items()} if c else {})

    def map_terms(self, fn) -> "LinComb":
        """Apply ``fn: term -> LinComb`` linearly."""
        out = LinComb()
        for t, c in self.terms.items():
            for t2, c2 in fn(t).terms.items():
                out.add_term(t2, c * c2)
        return out

    def items(self):
        return self.terms.items()

    def __eq__(self, other):
        return isinstance(other, LinComb) and self.terms == other.terms

    def __bool__(self):
        return bool(self.terms)

    def __repr__(self):
        return "LinComb(%r)" % (self.terms,)


def tensor_product(a: LinComb, b: LinComb, merge_left, merge_right) -> LinComb:
    """Componentwise product of two tensors (a1 (x) a2)(b1 (x) b2)."""
    out = LinComb()
    for (l1, r1), c1 in a.items():
        for (l2, r2), c2 in b.items():
            out.add_term((merge_left(l1, l2), merge_right(r1, r2)), c1 * c2)
    return out


# -- structure specification and basis generation ----------------------------

def _as_fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, float):
        return Fraction(str(x))
    return Fraction(x)


@dataclass(frozen=True)
class StructureSpec:
    """Generation rules for a graded tree/forest pair.

    ``deg_noise`` is the degree assigned to the noise mark (a non-round
    rational by default so degree truncations never tie).  ``cutoff`` bounds
    retained tree degrees, strictly for compound symbols; pure monomials are
    kept up to |k| <= cutoff because re-expansion emits them as left legs.
    ``edge_labels`` lists the planting decorations used when closing the
    basis.  ``product_symbols`` enables compound symbols X^k o prod I(...)
    carrying exactly one noise mark at the root; ``include_noise`` puts the
    bare noise symbol itself in the basis.  ``max_noises`` caps the noise
    count of generated symbols.
    """

    dim: int = 1
    deg_noise: Fraction = Fraction(-101, 100)
    cutoff: Fraction = Fraction(2)
    edge_labels: tuple[tuple[int, ...], ...] = None
    include_noise: bool = True
    product_symbols: bool = True
    max_noises: int | None = 3

    def __post_init__(self):
        object.__setattr__(self, "deg_noise", _as_fraction(self.deg_noise))
        object.__setattr__(self, "cutoff", _as_fraction(self.cutoff))
        if not (-2 < self.deg_noise < 0) and self.include_noise:
            raise ValueError(f"noise degree must lie in (-2, 0), got {self.deg_noise}")
        labels = self.edge_labels
        if labels is None:
            labels = (_zero(self.dim),)
        labels = tuple(tuple(int(v) for v in n) for n in labels)
        object.__setattr__(self, "edge_labels", labels)

    # construction helpers; children are kept in canonical order

    def unit(self) -> Tree:
        return Tree(_zero(self.dim), False, ())

    def noise(self) -> Tree:
        return Tree(_zero(self.dim), True, ())

    def monomial(self, k) -> Tree:
        if isinstance(k, int):
            k = (k,) + (0,) * (self.dim - 1)
        return Tree(tuple(k), False, ())

    def tree(self, k=None, noise=False, children=()) -> Tree:
        if k is None:
            k = _zero(self.dim)
        elif isinstance(k, int):
            k = (k,) + (0,) * (self.dim - 1)
        kids = tuple(sorted(((tuple(n), c) for n, c in children), key=self._child_key))
        return Tree(tuple(k), bool(noise), kids)

    def planted(self, tree: Tree, n=None) -> Tree:
        if n is None:
            n = _zero(self.dim)
        elif isinstance(n, int):
            n = (n,) + (0,) * (self.dim - 1)
        return Tree(_zero(self.dim), False, ((tuple(n), tree),))

    def forest_unit(self) -> Forest:
        return Forest(_zero(self.dim), ())

    def forest(self, k=None, factors=()) -> Forest:
        if k is None:
            k = _zero(self.dim)
        elif isinstance(k, int):
            k = (k,) + (0,) * (self.dim - 1)
        fac = tuple(sorted(((tuple(n), t) for n, t in factors), key=self._child_key))
        return Forest(tuple(k), fac)

    def forest_monomial(self, k) -> Forest:
        return self.forest(k, ())

    def _child_key(self, pair):
        n, t = pair
        return (self.planted_degree(t, n), serialize_tree(t), n)

    # degrees

    def degree(self, tree: Tree) -> Fraction:
        deg = Fraction(sum(tree.k))
        if tree.noise:
            deg += self.deg_noise
        for n, child in tree.children:
            deg += self.planted_degree(child, n)
        return deg

    def planted_degree(self, tree: Tree, n) -> Fraction:
        return Fraction(2 - sum(n)) + self.degree(tree)

    def forest_degree(self, f: Forest) -> Fraction:
        deg = Fraction(sum(f.k))
        for n, t in f.factors:
            deg += self.planted_degree(t, n)
        return deg

    def tree_product(self, a: Tree, b: Tree) -> Tree:
        if a.noise and b.noise:
            raise ValueError("cannot multiply two noise-marked symbols at one root")
        return self.tree(_add(a.k, b.k), a.noise or b.noise, a.children + b.children)

    def forest_product(self, a: Forest, b: Forest) -> Forest:
        return self.forest(_add(a.k, b.k), a.factors + b.factors)

    def tree_to_forest(self, t: Tree) -> Forest:
        """View a noise-free tree whose factors all have positive degree in the algebra."""
        if t.noise:
            raise ValueError("noise-marked trees have no forest counterpart")
        for n, c in t.children:
            if self.planted_degree(c, n) <= 0:
                raise ValueError("factor of non-positive degree is not an algebra symbol")
        return self.forest(t.k, t.children)


def pam_spec(dim: int = 1, cutoff=Fraction(2), max_noises: int | None = 3,
             deg_noise=Fraction(-101, 100)) -> StructureSpec:
    """Multiplicative-noise preset: noise just below -1, plantings I = I_0."""
    return StructureSpec(dim=dim, deg_noise=deg_noise, cutoff=_as_fraction(cutoff),
                         max_noises=max_noises)


def polynomial_spec(dim: int = 1, cutoff=Fraction(5, 2)) -> StructureSpec:
    """Pure monomial structure: no noise symbol, no compound products."""
    return StructureSpec(dim=dim, cutoff=_as_fraction(cutoff), include_noise=False,
                         product_symbols=False, max_noises=0)


# -- serialization -----------------------------------------------------------

def _fmt_vec(k: tuple[int, ...]) -> str:
    if len(k) == 1:
        return str(k[0])
    return "(" + ",".join(str(v) for v in k) + ")"


def _fmt_monomial(k: tuple[int, ...]) -> list[str]:
    parts = []
    if len(k) == 1:
        if k[0] == 1:
            parts.append("X")
        elif k[0] > 1:
            parts.append(f"X^{k[0]}")
    else:
        for axis, p in enumerate(k):
            if p == 1:
                parts.append(f"X{axis + 1}")
            elif p > 1:
                parts.append(f"X{axis + 1}^{p}")
    return parts


def serialize_tree(t: Tree) -> str:
    """Bracket grammar: monomial, `o`, then planted factors `I_n[...]`."""
    parts = _fmt_monomial(t.k)
    if t.noise:
        parts.append("o")
    for n, child in t.children:
        label = "I" if not any(n) else f"I_{_fmt_vec(n)}"
        parts.append(f"{label}[{serialize_tree(child)}]")
    return " ".join(parts) if parts else "1"


def serialize_forest(f: Forest) -> str:
    parts = _fmt_monomial(f.k)
    for n, t in f.factors:
        label = "I" if not any(n) else f"I_{_fmt_vec(n)}"
        parts.append(f"{label}[{serialize_tree(t)}]")
    return " ".join(parts) if parts else "1"


_TOKEN_X = re.compile(r"^X(?P<axis>\d+)?(\^(?P<pow>\d+))?$")
_TOKEN_I = re.compile(r"^I(_(?P<n>\((?:\d+,?)+\)|\d+))?\[(?P<body>.*)\]$")


def _split_tokens(s: str) -> list[str]:
    tokens, depth, cur = [], 0, []
    for ch in s:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == " " and depth == 0:
            if cur:
                tokens.append("".join(cur))
                cur = []
        else:
            cur.append(ch)
    if cur:
        tokens.append("".join(cur))
    return tokens


def _parse_vec(s: str, d: int) -> tuple[int, ...]:
    if s.startswith("("):
        vals = tuple(int(v) for v in s.strip("()").split(",") if v)
    else:
        vals = (int(s),)
    if len(vals) != d:
        raise ValueError(f"decoration {s} does not match dimension {d}")
    return vals


def parse_tree(s: str, spec: StructureSpec) -> Tree:
    s = s.strip()
    if s == "1":
        return spec.unit()
    k = [0] * spec.dim
    noise = False
    children = []
    for tok in _split_tokens(s):
        if tok == "o":
            noise = True
            continue
        m = _TOKEN_X.match(tok)
        if m:
            axis = int(m.group("axis")) - 1 if m.group("axis") else 0
            k[axis] += int(m.group("pow") or 1)
            continue
        m = _TOKEN_I.match(tok)
        if m:
            n = _parse_vec(m.group("n"), spec.dim) if m.group("n") else _zero(spec.dim)
            children.append((n, parse_tree(m.group("body"), spec)))
            continue
        raise ValueError(f"cannot parse token {tok!r}")
    return spec.tree(tuple(k), noise, children)


def parse_forest(s: str, spec: StructureSpec) -> Forest:
    t = parse_tree(s, spec)
    return spec.tree_to_forest(t)


# -- the structure: basis plus splitting maps --------------------------------

GEN_X = "X"          # generator key ('X', axis)
GEN_PLANT = "I"      # generator key ('I', n, tree)


class Structure:
    """A generated basis with cached splitting maps, counit and antipode."""

    def __init__(self, spec: StructureSpec, trees: tuple[Tree, ...]):
        self.spec = spec
        self.trees = trees
        self.tree_set = frozenset(trees)
        self._coproduct_cache: dict[Tree, LinComb] = {}
        self._coproduct_plus_cache: dict[tuple, LinComb] = {}
        self._antipode_cache: dict[tuple, LinComb] = {}
        self.plus_generators = self._enumerate_plus_generators()

    # ---- generators of the forest algebra

    def _enumerate_plus_generators(self):
        gens = [(GEN_X, axis) for axis in range(self.spec.dim)]
        seen = set()
        for t in self.trees:
            bound = Fraction(2) + self.spec.degree(t)
            total = 0
            while Fraction(total) < bound:
                for n in multiindices(self.spec.dim, total):
                    key = (GEN_PLANT, n, t)
                    if key not in seen:
                        seen.add(key)
                        gens.append(key)
                total += 1
        gens.sort(key=self._gen_sort_key)
        return tuple(gens)

    def _gen_sort_key(self, gen):
        if gen[0] == GEN_X:
            return (0, Fraction(1), str(gen[1]), ())
        _, n, t = gen
        return (1, self.spec.planted_degree(t, n), serialize_tree(t), n)

    def generator_degree(self, gen) -> Fraction:
        if gen[0] == GEN_X:
            return Fraction(1)
        _, n, t = gen
        return self.spec.planted_degree(t, n)

    def generator_forest(self, gen) -> Forest:
        if gen[0] == GEN_X:
            k = [0] * self.spec.dim
            k[gen[1]] = 1
            return self.spec.forest(tuple(k), ())
        _, n, t = gen
        return self.spec.forest(None, ((n, t),))

    def forest_generators(self, f: Forest):
        """Primitive factors of a forest: X axes with powers, planted factors."""
        gens = []
        for axis, p in enumerate(f.k):
            gens.extend([(GEN_X, axis)] * p)
        for n, t in f.factors:
            gens.append((GEN_PLANT, n, t))
        return gens

    # ---- splitting map on trees

    def coproduct(self, tree: Tree) -> LinComb:
        """Split a tree into (tree leg, forest leg) pairs with exact coefficients."""
        cached = self._coproduct_cache.get(tree)
        if cached is not None:
            return cached
        spec = self.spec
        out = LinComb.single((spec.unit(), spec.forest_unit()))
        for axis, power in enumerate(tree.k):
            for _ in range(power):
                out = tensor_product(out, self._coproduct_x(axis),
                                     spec.tree_product, spec.forest_product)
        if tree.noise:
            out = tensor_product(out, LinComb.single((spec.noise(), spec.forest_unit())),
                                 spec.tree_product, spec.forest_product)
        for n, child in tree.children:
            out = tensor_product(out, self._coproduct_planted(n, child),
                                 spec.tree_product, spec.forest_product)
        self._coproduct_cache[tree] = out
        return out

    def _coproduct_x(self, axis: int) -> LinComb:
        spec = self.spec
        k = [0] * spec.dim
        k[axis] = 1
        mono = spec.monomial(tuple(k))
        return LinComb([
            ((mono, spec.forest_unit()), 1),
            ((spec.unit(), spec.forest_monomial(tuple(k))), 1),
        ])

    def _coproduct_planted(self, n: tuple[int, ...], child: Tree) -> LinComb:
        spec = self.spec
        out = LinComb()
        for (a, b), c in self.coproduct(child).items():
            out.add_term((spec.planted(a, n), b), c)
        bound = spec.planted_degree(child, n)
        for ell in multiindices_below(spec.dim, bound):
            out.add_term(
                (spec.monomial(ell), spec.forest(None, ((_add(n, ell), child),))),
                Fraction(1, _factorial(ell)),
            )
        return out

    # ---- splitting map on the forest algebra

    def coproduct_plus(self, f: Forest) -> LinComb:
        """Split a forest into (forest, forest) pairs, multiplicatively."""
        spec = self.spec
        out = LinComb.single((spec.forest_unit(), spec.forest_unit()))
        for gen in self.forest_generators(f):
            out = tensor_product(out, self._coproduct_plus_gen(gen),
                                 spec.forest_product, spec.forest_product)
        return out

    def _coproduct_plus_gen(self, gen) -> LinComb:
        cached = self._coproduct_plus_cache.get(gen)
        if cached is not None:
            return cached
        spec = self.spec
        if gen[0] == GEN_X:
            g = self.generator_forest(gen)
            out = LinComb([
                ((g, spec.forest_unit()), 1),
                ((spec.forest_unit(), g), 1),
            ])
        else:
            _, n, child = gen
            out = LinComb()
            # plant the tree legs, keeping only positive-degree results
            for (a, b), c in self.coproduct(child).items():
                if spec.planted_degree(a, n) > 0:
                    out.add_term((spec.forest(None, ((n, a),)), b), c)
            bound = spec.planted_degree(child, n)
            for ell in multiindices_below(spec.dim, bound):
                out.add_term(
                    (spec.forest_monomial(ell), spec.forest(None, ((_add(n, ell), child),))),
                    Fraction(1, _factorial(ell)),
                )
        self._coproduct_plus_cache[gen] = out
        return out

    # ---- counit and antipode

    def counit(self, arg) -> Fraction:
        """Coefficient of the empty forest."""
        if isinstance(arg, Forest):
            return Fraction(1) if arg.is_unit() else Fraction(0)
        out = Fraction(0)
        for t, c in arg.items():
            if isinstance(t, Forest) and t.is_unit():
                out += c
        return out

    def antipode(self, arg) -> LinComb:
        """Antipode on the forest algebra, extended multiplicatively."""
        if isinstance(arg, LinComb):
            return arg.map_terms(self.antipode)
        spec = self.spec
        out = LinComb.single(spec.forest_unit())
        for gen in self.forest_generators(arg):
            out = _lincomb_forest_product(out, self._antipode_gen(gen), spec)
        return out

    def _antipode_gen(self, gen) -> LinComb:
        cached = self._antipode_cache.get(gen)
        if cached is not None:
            return cached
        spec = self.spec
        g = self.generator_forest(gen)
        out = LinComb.single(g, -1)
        for (f1, f2), c in self._coproduct_plus_gen(gen).items():
            if f1.is_unit() or f2.is_unit():
                continue
            # proper term: f1 * S(f2), recursion drops in degree
            piece = self.antipode(f2).scale(-c)
            for f, cf in piece.items():
                out.add_term(spec.forest_product(f1, f), cf)
        self._antipode_cache[gen] = out
        return out


def _lincomb_forest_product(a: LinComb, b: LinComb, spec: StructureSpec) -> LinComb:
    out = LinComb()
    for f1, c1 in a.items():
        for f2, c2 in b.items():
            out.add_term(spec.forest_product(f1, f2), c1 * c2)
    return out


# -- basis generation ---------------------------------------------------------

_MAX_ROUNDS = 50
_MAX_BASIS = 20000


def generate_basis(spec: StructureSpec) -> Structure:
    """Close the symbol set under planting and noise products below the cutoff.

    Seeds are the unit, the monomials with |k| <= cutoff and (optionally) the
    noise symbol.  Each round adds planted symbols I_n(tau) and compound
    products X^k o prod I_{n_i}(tau_i) of degree strictly below the cutoff,
    until nothing new appears.  Raises SubcriticalityError when the closure
    keeps growing.
    """
    trees: set[Tree] = {spec.unit()}
    total = 1
    while Fraction(total) <= spec.cutoff:
        trees.update(spec.monomial(k) for k in multiindices(spec.dim, total))
        total += 1
    if spec.include_noise:
        trees.add(spec.noise())

    def admissible(t: Tree) -> bool:
        if spec.max_noises is not None and t.noise_count() > spec.max_noises:
            return False
        return spec.degree(t) < spec.cutoff

    for _ in range(_MAX_ROUNDS):
        planted = []
        for t in sorted(trees, key=lambda t: (spec.degree(t), serialize_tree(t))):
            for n in spec.edge_labels:
                p = spec.planted(t, n)
                if admissible(p):
                    planted.append((n, t))
        new: set[Tree] = set()
        for n, t in planted:
            p = spec.planted(t, n)
            if p not in trees:
                new.add(p)
        if spec.product_symbols:
            new.update(_compound_products(spec, planted, admissible))
        new -= trees
        if not new:
            break
        trees.update(new)
        if len(trees) > _MAX_BASIS:
            raise SubcriticalityError(
                f"basis exceeded {_MAX_BASIS} symbols below cutoff {spec.cutoff}")
    else:
        raise SubcriticalityError(
            f"basis did not stabilize in {_MAX_ROUNDS} closure rounds")

    ordered = tuple(sorted(trees, key=lambda t: (spec.degree(t), serialize_tree(t))))
    return Structure(spec, ordered)


def _compound_products(spec: StructureSpec, planted, admissible):
    """Compound symbols X^k [o] F_1...F_m with factors from the planted pool.

    The noise mark is optional: noise-free products arise as counterterm
    shapes of root extractions (a symbol pruned of a noise-bearing pattern),
    so closing under them keeps preparation maps inside the span.
    """
    out = set()
    factors = sorted(planted, key=lambda p: (spec.planted_degree(p[1], p[0]),
                                             serialize_tree(p[1]), p[0]))
    max_factors = (spec.max_noises if spec.max_noises is not None else 8)
    noise_flags = (True, False) if spec.include_noise else (False,)

    def extend(start: int, chosen: tuple):
        for flag in noise_flags:
            if not flag and not chosen:
                continue   # bare monomials are seeded already
            tree0 = spec.tree(None, flag, chosen)
            if spec.max_noises is not None and tree0.noise_count() > spec.max_noises:
                continue
            base_deg = spec.degree(tree0)
            # all monomial decorations that keep the degree below the cutoff
            for k in multiindices_below(spec.dim, spec.cutoff - base_deg):
                cand = spec.tree(k, flag, chosen)
                if admissible(cand):
                    out.add(cand)
        if len(chosen) >= max_factors:
            return
        for i in range(start, len(factors)):
            n, t = factors[i]
            # degrees of extra factors may be negative only in pathological
            # specs; the round/size guards in generate_basis catch those
            extend(i, chosen + ((n, t),))

    extend(0, ())
    return out


# -- characters ---------------------------------------------------------------

class Character:
    """Multiplicative linear functional on the forest algebra.

    Defined by a rule on generators ('X', axis) and ('I', n, tree); values on
    forests are products over factors, values on combinations are sums.
    """

    def __init__(self, structure: Structure, rule, name: str = "char"):
        self.structure = structure
        self.rule = rule
        self.name = name
        self._memo = {}

    def on_generator(self, gen):
        v = self._memo.get(gen)
        if v is None:
            v = self.rule(gen)
            self._memo[gen] = v
        return v

    def __call__(self, arg):
        if isinstance(arg, LinComb):
            vals = [c * self(t) for t, c in arg.items()]
            return sum(vals) if vals else 0
        if isinstance(arg, Forest):
            out = 1
            for gen in self.structure.forest_generators(arg):
                out = out * self.on_generator(gen)
            return out
        return self.on_generator(arg)


def counit_character(structure: Structure) -> Character:
    return Character(structure, lambda gen: 0, name="counit")


def convolve(g1: Character, g2: Character) -> Character:
    """Convolution (g1 * g2)(sigma) = (g1 (x) g2) applied to the split of sigma."""
    st = g1.structure

    def rule(gen):
        total = 0
        for (f1, f2), c in st._coproduct_plus_gen(gen).items():
            total = total + c * g1(f1) * g2(f2)
        return total

    return Character(st, rule, name=f"({g1.name}*{g2.name})")


def inverse_character(g: Character) -> Character:
    """Convolution inverse g o S."""
    st = g.structure

    def rule(gen):
        return g(st._antipode_gen(gen))

    return Character(st, rule, name=f"{g.name}^-1")


def gamma_map(g: Character):
    """Re-expansion operator: tree -> dict of trees weighted by g on forest legs.

    Accepts a tree or a dict {tree: coefficient} (linear extension).  The
    coefficient type follows the character: exact Fractions stay exact,
    float-valued characters give float combinations.
    """
    st = g.structure

    def apply(arg):
        if isinstance(arg, dict):
            out = {}
            for t, c in arg.items():
                for t2, c2 in apply(t).items():
                    v = out.get(t2, 0) + c * c2
                    if v:
                        out[t2] = v
                    else:
                        out.pop(t2, None)
            return out
        out = {}
        for (a, b), c in st.coproduct(arg).items():
            v = out.get(a, 0) + c * g(b)
            if v:
                out[a] = v
            else:
                out.pop(a, None)
        return out

    return apply


def grading_check(structure: Structure) -> list[str]:
    """Degree bookkeeping of every split: returns violation messages (empty = pass)."""
    spec = structure.spec
    bad = []
    for t in structure.trees:
        dt = spec.degree(t)
        for (a, b), _ in structure.coproduct(t).items():
            da, db = spec.degree(a), spec.forest_degree(b)
            if da + db != dt:
                bad.append(f"degree split {da}+{db} != {dt} on {serialize_tree(t)}")
            if db < 0:
                bad.append(f"negative forest degree {db} on {serialize_tree(t)}")
            if a not in structure.tree_set:
                bad.append(f"left leg {serialize_tree(a)} of {serialize_tree(t)} not in basis")
            for n, tau in b.factors:
                if spec.planted_degree(tau, n) <= 0:
                    bad.append(f"non-positive factor in forest leg of {serialize_tree(t)}")
    return bad
