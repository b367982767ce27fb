"""Synthetic KG generators with controllable ground truth.

cyclic:        rel_k maps e_i -> e_{(i+k) mod N} within one language.
bilingual:     two pseudo-languages with mirrored cyclic structure and
               cross-lingual links pairing counterparts ("xA_7" <-> "xB_7").
compositional: object entities are deterministic functions of a copyable
               subject-name field, so novel subjects remain solvable.
"""

from __future__ import annotations

from .kg_store import Triple, XLink


def make_cyclic_kg(
    n_entities: int, n_relations: int, lang: str = "en", stem: str = "e"
) -> list[Triple]:
    ents = [f"{stem}{i:02d}" for i in range(n_entities)]
    return [
        Triple(lang, ents[i], f"rel_{k}", ents[(i + k) % n_entities])
        for k in range(1, n_relations + 1)
        for i in range(n_entities)
    ]


def make_bilingual_kg(
    n_entities: int = 60,
    n_relations: int = 4,
    langs: tuple[str, str] = ("aa", "ab"),
) -> tuple[list[Triple], list[Triple], list[XLink]]:
    """Mirrored cyclic KGs plus cross-lingual links between counterparts."""
    lang_a, lang_b = langs
    names_a = [f"xA_{i:02d}" for i in range(n_entities)]
    names_b = [f"xB_{i:02d}" for i in range(n_entities)]
    triples_a = [
        Triple(lang_a, names_a[i], f"rel_{k}", names_a[(i + k) % n_entities])
        for k in range(1, n_relations + 1)
        for i in range(n_entities)
    ]
    triples_b = [
        Triple(lang_b, names_b[i], f"rel_{k}", names_b[(i + k) % n_entities])
        for k in range(1, n_relations + 1)
        for i in range(n_entities)
    ]
    xlinks = [XLink(lang_a, names_a[i], lang_b, names_b[i]) for i in range(n_entities)]
    return triples_a, triples_b, xlinks


def make_compositional_kg(
    n_groups: int = 10,
    per_group: int = 10,
    train_per_group: int = 8,
    lang: str = "en",
) -> tuple[list[Triple], list[Triple]]:
    """Facts whose objects depend only on the subject's group field.

    Subjects are "u{g}n{i}"; relations map them to "k{g}" / "h{g}". Subjects
    with i >= train_per_group appear only in the test set (novel subjects).
    """
    train: list[Triple] = []
    test: list[Triple] = []
    for g in range(n_groups):
        for i in range(per_group):
            subj = f"u{g}n{i}"
            facts = [
                Triple(lang, subj, "kind", f"k{g}"),
                Triple(lang, subj, "home", f"h{g}"),
            ]
            (train if i < train_per_group else test).extend(facts)
    return train, test
