import matplotlib.pyplot as plt
import pytest

from latentcrab import cosmetics


def test_set_size_sizes_the_axes_area():
    fig, ax = plt.subplots()
    cosmetics.set_size(4, 3, ax)
    margins = fig.subplotpars
    width, height = fig.get_size_inches()
    assert width * (margins.right - margins.left) == pytest.approx(4)
    assert height * (margins.top - margins.bottom) == pytest.approx(3)
    plt.close(fig)


def test_set_size_defaults_to_current_axes():
    fig = plt.figure()
    fig.add_subplot()
    cosmetics.set_size(2, 2)
    margins = fig.subplotpars
    assert fig.get_size_inches()[0] * (margins.right - margins.left) == pytest.approx(2)
    plt.close(fig)
