import pandas as pd
import pytest

from koala import build_parser, main
from services.floorsim import RenderedRun, generate_mapping_run, persist_run


def test_parser_commands():
    args = build_parser().parse_args(['localize', 'runs/eval_4m2', '--map', 'm.kmap', '--seed', '3'])
    assert args.command == 'localize'
    assert args.run == 'runs/eval_4m2'
    assert args.map_path == 'm.kmap'
    assert args.seed == 3


def test_unknown_command_exits():
    with pytest.raises(SystemExit):
        build_parser().parse_args(['train'])


def test_gen_floor(tmp_path, capsys):
    config = tmp_path / 'tiny.env'
    config.write_text("FLOOR_WIDTH=0.1\nFLOOR_HEIGHT=0.1\n")
    assert main(['gen-floor', '--config', str(config), '--out', str(tmp_path)]) == 0
    assert (tmp_path / 'floor.kflt').exists()
    assert '✅' in capsys.readouterr().out


def test_bad_config_fails(tmp_path, capsys):
    config = tmp_path / 'bad.env'
    config.write_text("NOT_A_KEY=1\n")
    assert main(['gen-floor', '--config', str(config), '--out', str(tmp_path)]) == 1
    assert 'Unknown config key' in capsys.readouterr().err


def test_build_map_without_runs_fails(tmp_path, capsys):
    assert main(['build-map', '--out', str(tmp_path)]) == 1
    assert '❌' in capsys.readouterr().err


def test_build_map_option_for_patch_export():
    args = build_parser().parse_args(['build-map', 'runs/mapping_00', '--export-patches', 'patches'])
    assert args.runs == ['runs/mapping_00']
    assert args.export_patches == 'patches'
    assert build_parser().parse_args(['build-map']).export_patches is None


def test_build_map_exports_training_patches(tmp_path, capsys, small_floor, cam):
    log = generate_mapping_run(small_floor, cam, 0.03, origin=(0.04, 0.04))
    persist_run(RenderedRun(small_floor, cam, log, seed=1), log, str(tmp_path / 'runs' / 'mapping_00'))
    patches = tmp_path / 'patches'

    assert main(['build-map', '--out', str(tmp_path), '--export-patches', str(patches)]) == 0
    assert 'training patches' in capsys.readouterr().out
    assert (tmp_path / 'map.kmap').exists()
    manifest = pd.read_csv(patches / 'manifest.csv')
    assert len(manifest) > 0
    assert (manifest.groupby('cluster_id').size() == 4).all()
    for rel in manifest['file']:
        assert (patches / rel).exists()
