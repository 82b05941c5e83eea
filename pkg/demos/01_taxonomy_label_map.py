"""
Deriving basic-level labels from a category hierarchy
=====================================================

A small animal/vehicle hierarchy is written as an edge list, three nodes are
marked as basic-level categories, and every leaf is assigned to its nearest
marked ancestor by an upward breadth-first search.
"""

import tempfile
from pathlib import Path

from hiercurric import taxonomy

# a DAG, not a tree: the minivan has two parents, and the first listed
# parent wins the label assignment
EDGES = """\
root>animal
root>vehicle
animal>dog
animal>fish
dog>poodle
dog>beagle
vehicle>car
vehicle>van
car>minivan
van>minivan
car>suv
"""

workdir = Path(tempfile.mkdtemp())
synsets = workdir / "synsets.txt"
synsets.write_text(EDGES)

graph = taxonomy.parse_synset_file(synsets)
print(f"parsed {len(graph.nodes)} nodes, {len(graph.edges)} edges")
print(f"leaves: {sorted(graph.leaf_set)}")

# validation is fail-closed: a mark set that leaves any leaf uncovered,
# or nests one mark under another, is rejected with a full listing
graph = taxonomy.validate_basic_marks(graph, {"dog", "fish", "car", "van"})
labelmap = taxonomy.allocate_descendants(graph)

print("\nleaf -> basic assignment:")
for leaf in labelmap.sub_names:
    sub_i, basic_i = labelmap.entries[leaf]
    print(f"  {leaf:8s} sub_index={sub_i} -> {labelmap.basic_names[basic_i]}")

print("\nheights of the basic categories above their deepest leaf:")
print(" ", taxonomy.category_height_histogram(graph))

out = workdir / "labelmap.csv"
taxonomy.labelmap_to_csv(labelmap, out)
print(f"\nwrote {out}")
print(out.read_text())
