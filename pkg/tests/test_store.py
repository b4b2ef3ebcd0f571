import numpy as np
import pytest

from vortex3d.store import (
    Checkpoint,
    CorruptionError,
    FormatError,
    GenePanel,
    Modality,
    PanelKind,
    ParseError,
    SpotTable,
    Volume,
    load_checkpoint,
    load_spot_table,
    load_volume,
    save_checkpoint,
    save_spot_table,
    save_volume,
)


@pytest.fixture
def panel():
    return GenePanel(genes=["GA", "GB", "GC"], kind=PanelKind.HEG)


def write(path, text):
    path.write_text(text)
    return path


class TestGenePanel:
    def test_rejects_duplicates(self):
        with pytest.raises(ValueError):
            GenePanel(genes=["A", "A"])

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            GenePanel(genes=[])

    def test_case_sensitive(self):
        p = GenePanel(genes=["msmb", "MSMB"])
        assert len(p) == 2


class TestSpotTableCSV:
    def test_direct_parse(self, tmp_path, panel):
        f = write(tmp_path / "s.csv",
                  "spot_id,section_id,x_um,y_um,batch_id,GA,GB,GC\n"
                  "s1,sec0,0.0,0.0,0,1,2,3\n"
                  "s2,sec0,100.0,0.0,0,4,5,6\n")
        t = load_spot_table(f, panel)
        assert t.n_spots == 2
        assert t.counts.shape == (2, 3)
        np.testing.assert_array_equal(t.counts[0], [1, 2, 3])

    def test_missing_gene_zero_filled_with_warning(self, tmp_path, panel):
        f = write(tmp_path / "s.csv",
                  "spot_id,section_id,x_um,y_um,batch_id,GA,GC\n"
                  "s1,sec0,0.0,0.0,0,1,3\n")
        with pytest.warns(UserWarning, match="GB"):
            t = load_spot_table(f, panel)
        np.testing.assert_array_equal(t.counts[0], [1, 0, 3])

    def test_reorders_to_panel_order(self, tmp_path, panel):
        f = write(tmp_path / "s.csv",
                  "spot_id,section_id,x_um,y_um,batch_id,GC,GA,GB\n"
                  "s1,sec0,0.0,0.0,0,3,1,2\n")
        t = load_spot_table(f, panel)
        np.testing.assert_array_equal(t.counts[0], [1, 2, 3])

    def test_negative_count_names_line(self, tmp_path, panel):
        f = write(tmp_path / "s.csv",
                  "spot_id,section_id,x_um,y_um,batch_id,GA,GB,GC\n"
                  "s1,sec0,0.0,0.0,0,1,2,3\n"
                  "s2,sec0,1.0,0.0,0,1,-5,3\n")
        with pytest.raises(ParseError, match="line 3"):
            load_spot_table(f, panel)

    def test_wrong_arity_names_line(self, tmp_path, panel):
        f = write(tmp_path / "s.csv",
                  "spot_id,section_id,x_um,y_um,batch_id,GA,GB,GC\n"
                  "s1,sec0,0.0,0.0,0,1,2\n")
        with pytest.raises(ParseError, match="line 2"):
            load_spot_table(f, panel)

    def test_round_trip_bit_exact(self, tmp_path, panel):
        t = SpotTable(
            panel=panel,
            spot_ids=["a", "b"],
            section_ids=["s", "s"],
            x_um=[0.1, 100.73],
            y_um=[-3.25, 7.0],
            counts=[[1.5, 0.0, 2.25], [0.0, 9.125, 4.0]],
            batch_ids=[0, 1],
        )
        save_spot_table(t, tmp_path / "t.csv")
        back = load_spot_table(tmp_path / "t.csv", panel)
        np.testing.assert_array_equal(back.counts, t.counts)
        np.testing.assert_array_equal(back.x_um, t.x_um)
        assert back.spot_ids == t.spot_ids

    def test_duplicate_spot_in_section_rejected(self, panel):
        with pytest.raises(ValueError, match="duplicate"):
            SpotTable(panel=panel, spot_ids=["a", "a"], section_ids=["s", "s"],
                      x_um=[0, 1], y_um=[0, 1],
                      counts=np.zeros((2, 3)), batch_ids=[0, 0])


class TestVolume:
    def test_u16_round(self, tmp_path):
        vox = np.arange(4 * 4 * 2, dtype=np.uint16).reshape(4, 4, 2)
        v = Volume(dims=(4, 4, 2), spacing_um=(4, 4, 4), voxels=vox,
                   modality=Modality.MICROCT)
        save_volume(v, tmp_path / "v.raw")
        back = load_volume(tmp_path / "v.raw")
        assert back.dims == (4, 4, 2)
        assert back.voxels.dtype == np.float32
        np.testing.assert_array_equal(back.voxels, vox.astype(np.float32))

    def test_length_mismatch(self, tmp_path):
        import json

        vox = np.zeros((4, 4, 3), dtype=np.uint16)
        v = Volume(dims=(4, 4, 3), spacing_um=(1, 1, 1), voxels=vox)
        save_volume(v, tmp_path / "v.raw")
        meta = json.loads((tmp_path / "v.raw.json").read_text())
        meta["dims"] = [4, 4, 2]  # sidecar disagrees with blob length
        (tmp_path / "v.raw.json").write_text(json.dumps(meta))
        with pytest.raises(FormatError, match="blob length"):
            load_volume(tmp_path / "v.raw")

    def test_f32_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        vox = rng.random((5, 3, 2), dtype=np.float32)
        v = Volume(dims=(5, 3, 2), spacing_um=(2, 2, 2), voxels=vox)
        save_volume(v, tmp_path / "v.raw")
        back = load_volume(tmp_path / "v.raw")
        assert back.voxels.tobytes() == vox.tobytes()


class TestCheckpoint:
    def make(self):
        rng = np.random.default_rng(1)
        return Checkpoint(
            tensors={
                "a.w": rng.normal(size=(3, 4)).astype(np.float32),
                "a.b": rng.normal(size=(4,)).astype(np.float32),
                "step": np.array([7], dtype=np.int64),
            },
            manifest={"stage": "II", "config_digest": "abc"},
        )

    def test_round_trip_bit_identical(self, tmp_path):
        ck = self.make()
        save_checkpoint(ck, tmp_path / "c.ckpt")
        back = load_checkpoint(tmp_path / "c.ckpt")
        assert back.manifest["stage"] == "II"
        assert set(back.tensors) == set(ck.tensors)
        for k in ck.tensors:
            assert back.tensors[k].tobytes() == ck.tensors[k].tobytes()
            assert back.tensors[k].dtype == ck.tensors[k].dtype
        assert back.digest() == ck.digest()

    def test_truncated_blob_is_corruption(self, tmp_path):
        ck = self.make()
        save_checkpoint(ck, tmp_path / "c.ckpt")
        raw = (tmp_path / "c.ckpt").read_bytes()
        (tmp_path / "c.ckpt").write_bytes(raw[:-5])
        with pytest.raises(CorruptionError):
            load_checkpoint(tmp_path / "c.ckpt")

    def test_flipped_byte_is_corruption(self, tmp_path):
        ck = self.make()
        save_checkpoint(ck, tmp_path / "c.ckpt")
        raw = bytearray((tmp_path / "c.ckpt").read_bytes())
        raw[-1] ^= 0xFF
        (tmp_path / "c.ckpt").write_bytes(bytes(raw))
        with pytest.raises(CorruptionError):
            load_checkpoint(tmp_path / "c.ckpt")

    def test_stage_metadata_preserved_across_stages(self, tmp_path):
        ck = self.make()
        ck.manifest["stage"] = "II"
        save_checkpoint(ck, tmp_path / "c.ckpt")
        back = load_checkpoint(tmp_path / "c.ckpt")
        # a stage-II checkpoint is accepted for later fine-tuning; the stage
        # travels in the manifest
        assert back.manifest["stage"] == "II"

    def test_load_same_file_twice_identical_digest(self, tmp_path):
        ck = self.make()
        save_checkpoint(ck, tmp_path / "c.ckpt")
        d1 = load_checkpoint(tmp_path / "c.ckpt").digest()
        d2 = load_checkpoint(tmp_path / "c.ckpt").digest()
        assert d1 == d2
