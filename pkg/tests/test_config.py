#!/usr/bin/env python3
"""
Unit tests for formbound.config module.
Tests INI loading, presets, validation and builders.
"""
import pytest
import sys
import numpy as np
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent / 'src'))

from formbound.config import (
    PRESETS,
    ball_from,
    build_mesh_from,
    build_operator,
    build_schedule,
    build_solve_config,
    build_weight,
    load_run_config,
    read_config,
    read_keyvalue_file,
    validate,
)
from formbound.core import radial_mesh
from formbound.errors import InputError


def write_ini(tmp_path, text, name="run.ini"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


CAPACITY_INI = """
[run]
seed = 1
out = results

[problem]
n = 3
p = 2

[mesh]
kind = radial
lower = 0
upper = 2
cells = 64

[capacity]
rho = 1
"""


class TestLoadRunConfig:
    """Test reading and merging configuration sources."""

    def test_read_sections(self, tmp_path):
        """Test that sections and keys come back as strings."""
        sections = read_config(write_ini(tmp_path, CAPACITY_INI))
        assert sections["problem"] == {"n": "3", "p": "2"}
        assert sections["mesh"]["cells"] == "64"

    def test_missing_file(self, tmp_path):
        """Test that a missing config file names its path."""
        with pytest.raises(InputError) as exc:
            read_config(str(tmp_path / "absent.ini"))
        assert exc.value.path.endswith("absent.ini")

    def test_run_section(self, tmp_path):
        """Test seed and output directory from [run]."""
        cfg = load_run_config("capacity", write_ini(tmp_path, CAPACITY_INI))
        assert cfg.seed == 1
        assert cfg.out == "results"
        assert cfg.threads is None

    def test_overrides_win(self, tmp_path):
        """Test that command-line overrides replace file keys."""
        cfg = load_run_config("capacity", write_ini(tmp_path, CAPACITY_INI),
                              overrides={"out": "elsewhere", "seed": 7, "threads": 2})
        assert (cfg.out, cfg.seed, cfg.threads) == ("elsewhere", 7, 2)

    def test_preset_merged_with_file(self, tmp_path):
        """Test that file keys update the preset."""
        path = write_ini(tmp_path, "[mesh]\ncells = 128\n")
        cfg = load_run_config("capacity", path, preset="condenser")
        assert cfg.get("mesh", "cells") == "128"
        assert cfg.get("mesh", "upper") == "2"
        assert PRESETS["condenser"]["mesh"]["cells"] == "4096"

    def test_unknown_preset(self):
        """Test that an unknown preset is rejected."""
        with pytest.raises(InputError):
            load_run_config("capacity", preset="nope")

    @pytest.mark.parametrize("key", ["seed", "threads"])
    def test_bad_integers(self, tmp_path, key):
        """Test that non-integer seeds and thread counts are rejected."""
        path = write_ini(tmp_path, f"[run]\n{key} = many\n")
        with pytest.raises(InputError, match=key):
            load_run_config("capacity", path)


class TestValidate:
    """Test the fail-fast validation pass."""

    def test_valid_capacity(self, tmp_path):
        """Test a complete capacity configuration."""
        cfg = validate(load_run_config("capacity", write_ini(tmp_path, CAPACITY_INI)))
        assert cfg.params.n == 3
        mesh = build_mesh_from(cfg)
        assert mesh.ncells == 64
        assert ball_from(cfg, "capacity", mesh).radius == 1.0

    def test_needs_problem(self, tmp_path):
        """Test that n and p are required."""
        cfg = load_run_config("capacity", write_ini(tmp_path, "[run]\nseed = 0\n"))
        with pytest.raises(InputError, match="n and p"):
            validate(cfg)

    def test_hardy_verify_defaults(self):
        """Test that the hardy-verify preset validates without a mesh."""
        cfg = validate(load_run_config("hardy-verify", preset="hardy-verify"))
        assert cfg.mesh_spec is None
        assert cfg.get_floats("hardy", "inner_radii") == (1e-2, 1e-3, 1e-4)

    def test_stochastic_needs_seed(self, tmp_path):
        """Test that formbound refuses to run without a seed."""
        text = CAPACITY_INI.replace("seed = 1\n", "")
        with pytest.raises(InputError, match="seed"):
            validate(load_run_config("formbound", write_ini(tmp_path, text)))

    def test_threads_positive(self, tmp_path):
        """Test that zero threads is rejected."""
        cfg = load_run_config("capacity", write_ini(tmp_path, CAPACITY_INI), overrides={"threads": 0})
        with pytest.raises(InputError, match="threads"):
            validate(cfg)

    def test_needs_mesh(self, tmp_path):
        """Test that capacity needs a [mesh]."""
        text = "[run]\nseed = 0\n[problem]\nn = 3\np = 2\n"
        with pytest.raises(InputError, match=r"\[mesh\]"):
            validate(load_run_config("capacity", write_ini(tmp_path, text)))

    def test_missing_referenced_file(self, tmp_path):
        """Test that a missing table file fails before any compute."""
        text = CAPACITY_INI + "\n[weight]\nkind = table\ndensity = density.csv\n"
        with pytest.raises(InputError) as exc:
            validate(load_run_config("capacity", write_ini(tmp_path, text)))
        assert exc.value.path == str(tmp_path / "density.csv")

    @pytest.mark.parametrize("section,kind", [("operator", "anisotropic"), ("weight", "coulomb")])
    def test_unknown_kinds(self, tmp_path, section, kind):
        """Test that unknown operator and weight kinds are rejected."""
        text = CAPACITY_INI + f"\n[{section}]\nkind = {kind}\n"
        with pytest.raises(InputError, match="unknown"):
            validate(load_run_config("capacity", write_ini(tmp_path, text)))

    def test_hardy_needs_subcritical(self, tmp_path):
        """Test that a Hardy weight with p >= n is rejected."""
        text = CAPACITY_INI.replace("p = 2", "p = 3") + "\n[weight]\nkind = hardy\n"
        with pytest.raises(InputError, match="p < n"):
            validate(load_run_config("capacity", write_ini(tmp_path, text)))

    def test_decompose_needs_c0(self, tmp_path):
        """Test that decompose requires c0."""
        with pytest.raises(InputError, match="c0"):
            validate(load_run_config("decompose", write_ini(tmp_path, CAPACITY_INI)))

    def test_mesh_built_and_cached(self, tmp_path):
        """Test that validation builds the mesh once and keeps it."""
        cfg = validate(load_run_config("solve", write_ini(tmp_path, CAPACITY_INI)))
        assert cfg.mesh is not None
        assert build_mesh_from(cfg) is cfg.mesh

    def test_bad_mesh_rejected(self, tmp_path):
        """Test that a mesh that cannot be built fails validation."""
        with pytest.raises(InputError, match="cell count"):
            validate(load_run_config("solve", write_ini(tmp_path, CAPACITY_INI.replace("cells = 64", "cells = 2"))))

    def test_capacity_needs_radius(self, tmp_path):
        """Test that capacity without a radius fails validation."""
        text = CAPACITY_INI.replace("rho = 1\n", "")
        with pytest.raises(InputError, match="rho"):
            validate(load_run_config("capacity", write_ini(tmp_path, text)))

    def test_pipeline_schedule(self, tmp_path):
        """Test that the pipeline schedule is built from [pipeline] keys and cached."""
        text = CAPACITY_INI + "\n[pipeline]\nlevels = 3\ncells = 16\n"
        cfg = validate(load_run_config("pipeline", write_ini(tmp_path, text)))
        schedule = build_schedule(cfg)
        assert schedule is cfg.schedule
        assert schedule.levels == 3
        assert schedule.meshes[0].inner == pytest.approx(0.05)
        assert schedule.meshes[-1].outer == pytest.approx(1.0 - 0.0125)

    def test_unknown_schedule_kind(self, tmp_path):
        """Test that an unknown exhaustion kind is rejected."""
        text = CAPACITY_INI + "\n[pipeline]\nkind = spheres\n"
        with pytest.raises(InputError, match="kind"):
            validate(load_run_config("pipeline", write_ini(tmp_path, text)))

    def test_endpoint_preset(self):
        """Test that the endpoint preset validates with two unmollified annuli."""
        cfg = validate(load_run_config("pipeline", preset="endpoint"))
        assert (cfg.params.n, cfg.params.p) == (5, 3.0)
        assert cfg.get("pipeline", "mollify") == "false"
        assert [m.inner for m in cfg.schedule.meshes] == pytest.approx([1e-3, 1e-4])


class TestMeshFiles:
    """Test mesh descriptions from key=value files."""

    def test_mesh_file(self, tmp_path):
        """Test that a mesh file is resolved next to the config."""
        (tmp_path / "grid.txt").write_text("kind = radial\nlower = 0.1\nupper = 1\ncells = 32\ngrading = log\n")
        text = "[run]\nseed = 0\n[problem]\nn = 3\np = 2\n[mesh]\nfile = grid.txt\n[capacity]\nrho = 0.5\n"
        cfg = validate(load_run_config("capacity", write_ini(tmp_path, text)))
        mesh = build_mesh_from(cfg)
        assert mesh.ncells == 32
        assert mesh.inner == pytest.approx(0.1)
        assert str(tmp_path / "grid.txt") in cfg.files

    def test_keyvalue_missing(self, tmp_path):
        """Test that a missing key=value file is rejected."""
        with pytest.raises(InputError):
            read_keyvalue_file(str(tmp_path / "none.txt"), "mesh")

    def test_tensor_mesh(self, tmp_path):
        """Test a tensor mesh description."""
        text = ("[run]\nseed = 0\n[problem]\nn = 2\np = 2\n"
                "[mesh]\nkind = tensor\nlower = 0,0\nupper = 1,1\ncells = 8\n[capacity]\nrho = 0.25\n")
        mesh = build_mesh_from(validate(load_run_config("capacity", write_ini(tmp_path, text))))
        assert mesh.ncells == 64


class TestBuilders:
    """Test operator, weight and solver builders."""

    def _cfg(self, tmp_path, extra=""):
        return validate(load_run_config("capacity", write_ini(tmp_path, CAPACITY_INI + extra)))

    def test_default_operator(self, tmp_path):
        """Test that the default operator is the p-Laplacian with m = M = 1."""
        cfg = self._cfg(tmp_path)
        op = build_operator(cfg, radial_mesh(0.0, 2.0, 3, 64))
        assert (op.m, op.M) == (1.0, 1.0)

    def test_oscillating_operator(self, tmp_path):
        """Test ellipticity bounds from min_weight and max_weight."""
        cfg = self._cfg(tmp_path, "\n[operator]\nkind = oscillating\nmin_weight = 0.5\nmax_weight = 3\n")
        op = build_operator(cfg, radial_mesh(0.0, 2.0, 3, 64))
        assert (op.m, op.M) == (0.5, 3.0)

    def test_zero_and_hardy_weights(self, tmp_path):
        """Test the zero and Hardy weights."""
        mesh = radial_mesh(0.0, 2.0, 3, 64)
        assert build_weight(self._cfg(tmp_path), mesh).is_zero()
        hardy = build_weight(self._cfg(tmp_path, "\n[weight]\nkind = hardy\nt = 0.5\n"), mesh)
        assert hardy.singular_origin

    def test_table_weight(self, tmp_path):
        """Test a density table read next to the config."""
        (tmp_path / "density.csv").write_text("density\n" + "\n".join(["1.0"] * 64) + "\n")
        cfg = self._cfg(tmp_path, "\n[weight]\nkind = table\ndensity = density.csv\n")
        weight = build_weight(cfg, radial_mesh(0.0, 2.0, 3, 64))
        assert not weight.is_zero()

    def test_table_rows_checked(self, tmp_path):
        """Test that a table of the wrong length is rejected."""
        (tmp_path / "density.csv").write_text("density\n1.0\n2.0\n")
        cfg = self._cfg(tmp_path, "\n[weight]\nkind = table\ndensity = density.csv\n")
        with pytest.raises(InputError, match="rows"):
            build_weight(cfg, radial_mesh(0.0, 2.0, 3, 64))

    def test_solve_config(self, tmp_path):
        """Test solver keys and the default continuation for p != 2."""
        cfg = self._cfg(tmp_path, "\n[solve]\ntolerance = 1e-8\n")
        assert build_solve_config(cfg).tolerance == 1e-8
        cfg3 = validate(load_run_config("capacity", write_ini(tmp_path, CAPACITY_INI.replace("p = 2", "p = 2.5"),
                                                               "p25.ini")))
        assert build_solve_config(cfg3).continuation_steps == 4

    def test_bad_solve_value(self, tmp_path):
        """Test that a non-numeric solver key is rejected during validation."""
        with pytest.raises(InputError, match="max_iterations"):
            self._cfg(tmp_path, "\n[solve]\nmax_iterations = lots\n")

    def test_ball_needs_radius(self, tmp_path):
        """Test that a missing radius is rejected."""
        cfg = self._cfg(tmp_path)
        with pytest.raises(InputError):
            ball_from(cfg, "formbound", radial_mesh(0.0, 2.0, 3, 64))


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
