"""
Knowledge filters on a hand-made graph
======================================

A toy graph with two diagnosis codes and three medications, small enough to
read every number. We build the code-concept neighborhoods, mix relation
embeddings into filters, and watch one round of aggregation.

Run with ``python demos/01_knowledge_filters.py``.
"""

import numpy as np

from dkinet.aggregation import (build_knowledge_tables, distance_correlation, filter_attention,
                                filter_embeddings, independence_loss)
from dkinet.ehr import CodeVocab
from dkinet.kg import CodeConceptMap, KnowledgeGraph, build_filter_graph, num_code_rows
from dkinet.tensor import Tensor

np.set_printoptions(precision=3, suppress=True)

# Concepts and typed edges. "hypertension" links to two drug classes.
kg = KnowledgeGraph.from_named_triples([
    ("hypertension", "treated_by", "ace_inhibitor"),
    ("hypertension", "treated_by", "beta_blocker"),
    ("ace_inhibitor", "interacts_with", "potassium"),
    ("diabetes", "treated_by", "biguanide"),
    ("diabetes", "associated_with", "hypertension"),
])
print("concepts:", kg.concepts)
print("relations:", kg.relations)

# Code rows are stacked diag, proc, med, plus a trailing PAD medication row.
vocab = CodeVocab(diag=["401.9", "250.00"], proc=[], med=["lisinopril", "metoprolol", "metformin"])
concept = {name: i for i, name in enumerate(kg.concepts)}
rows = {"401.9": 0, "250.00": 1, "lisinopril": 2, "metoprolol": 3, "metformin": 4}
pairs = [("401.9", "hypertension"), ("250.00", "diabetes"), ("lisinopril", "ace_inhibitor"),
         ("metoprolol", "beta_blocker"), ("metformin", "biguanide")]
cmap = CodeConceptMap(np.array([rows[c] for c, _ in pairs]), np.array([concept[u] for _, u in pairs]))

# With |F| filters every mapped concept shows up once per filter.
num_filters = 2
_, index = build_filter_graph(cmap, num_filters, kg, num_code_rows(vocab))
print("|N_c| for 401.9:", len(index.n_c(0)))

rng = np.random.default_rng(0)
dim = 4
concepts = Tensor(rng.uniform(-1, 1, (kg.num_concepts, dim)))
relations = Tensor(rng.uniform(-1, 1, (kg.num_relations, dim)))
codes = Tensor(rng.uniform(-1, 1, (num_code_rows(vocab), dim)))
filter_w = Tensor(rng.normal(size=(num_filters, kg.num_relations)))

# A filter is a softmax mix of relation embeddings.
filters = filter_embeddings(filter_w, relations)
print("filter embeddings:\n", filters.data)

# Each code attends over the filters; rows sum to one.
print("attention of each code over the filters:\n", filter_attention(codes, filters).data)

tables = build_knowledge_tables(concepts, relations, codes, filter_w, index, 1,
                                {"diag": 2, "proc": 0, "med": 3})
print("knowledge-enhanced diag rows:\n", tables.diag.data)
print("knowledge-enhanced med rows (last is PAD):\n", tables.med.data)

# Filters should encode different things. Distance correlation measures how
# much two of them overlap; the loss sums it over ordered pairs.
print("dCor(filter 0, filter 1) = %.3f" % distance_correlation(filters[0], filters[1]).item())
print("independence loss = %.3f" % independence_loss(filters).item())
