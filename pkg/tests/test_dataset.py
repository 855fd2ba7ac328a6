import numpy as np
import pytest

from fixpp.dataset import (
    Fixation,
    FixationDataset,
    count_map,
    fixation_cell,
    read_fixation_csv,
    write_fixation_csv,
)


class TestCellMapping:
    def test_floor_division(self):
        # 100-px image on a 10-cell grid: 10 px per cell
        assert fixation_cell(34.9, 0.0, (100, 100), (10, 10)) == (0, 3)
        assert fixation_cell(35.0, 0.0, (100, 100), (10, 10)) == (0, 3)

    def test_far_edge_clamps_to_last_cell(self):
        assert fixation_cell(100.0, 100.0, (100, 100), (10, 10)) == (9, 9)

    def test_out_of_bounds_rejected(self):
        with pytest.raises(ValueError):
            fixation_cell(-0.1, 5.0, (100, 100), (10, 10))
        with pytest.raises(ValueError):
            fixation_cell(5.0, 100.1, (100, 100), (10, 10))

    def test_count_map(self):
        fx = [Fixation("i", "s", 5.0, 5.0), Fixation("i", "s", 5.0, 5.0),
              Fixation("i", "s", 95.0, 95.0)]
        counts = count_map(fx, (100, 100), (10, 10))
        assert counts[0, 0] == 2.0
        assert counts[9, 9] == 1.0
        assert counts.sum() == 3.0


class TestDataset:
    def test_bounds_validated_on_construction(self):
        with pytest.raises(ValueError):
            FixationDataset(
                image_sizes={"i": (10, 10)},
                fixations=[Fixation("i", "s", 11.0, 0.0)],
            )

    def test_unknown_image_rejected(self):
        with pytest.raises(KeyError):
            FixationDataset(
                image_sizes={"i": (10, 10)},
                fixations=[Fixation("j", "s", 1.0, 1.0)],
            )

    def test_filter(self):
        ds = FixationDataset(
            image_sizes={"a": (10, 10), "b": (10, 10)},
            fixations=[
                Fixation("a", "s1", 1.0, 1.0),
                Fixation("a", "s2", 2.0, 2.0),
                Fixation("b", "s1", 3.0, 3.0),
            ],
        )
        sub = ds.filter(images=["a"], subjects=["s1"])
        assert sub.n_fixations() == 1
        assert sub.image_ids == ["a"]
        assert ds.subjects() == ["s1", "s2"]

    def test_csv_round_trip(self, tmp_path):
        ds = FixationDataset(
            image_sizes={"a": (100, 80), "empty": (50, 50)},
            fixations=[
                Fixation("a", "s1", 12.25, 64.5),
                Fixation("a", "s2", 99.0, 0.0),
            ],
        )
        path = tmp_path / "fix.csv"
        write_fixation_csv(ds, path)
        back = read_fixation_csv(path)
        assert back.image_sizes == ds.image_sizes
        assert back.fixations == ds.fixations

    def test_csv_missing_columns(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("image,x,y\na,1,2\n")
        with pytest.raises(ValueError, match="missing columns"):
            read_fixation_csv(path)

    def test_csv_inconsistent_dims(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text(
            "image,width,height,subject,x,y\na,10,10,s,1,1\na,20,10,s,1,1\n"
        )
        with pytest.raises(ValueError, match="inconsistent"):
            read_fixation_csv(path)
