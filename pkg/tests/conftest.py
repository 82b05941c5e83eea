import pytest

from hiercurric import taxonomy

ANIMAL_EDGES = """\
root>animal
root>vehicle
animal>dog
animal>fish
dog>poodle
dog>beagle
vehicle>car
car>suv
"""


@pytest.fixture
def animal_file(tmp_path):
    path = tmp_path / "synsets.txt"
    path.write_text(ANIMAL_EDGES)
    return path


@pytest.fixture
def animal_graph(animal_file):
    return taxonomy.parse_synset_file(animal_file)


@pytest.fixture
def animal_marked(animal_graph):
    return taxonomy.validate_basic_marks(animal_graph, {"dog", "fish", "car"})
