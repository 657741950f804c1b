import asyncio
import functools
import sys
from typing import Optional

import asyncclick as click

from app import pipeline
from app.config.settings import BaseConfig, RunConfig
from app.constants import ABILENE_INTERVAL_SECONDS, SERVICE_DESCRIPTION, ClusterMethod
from app.constants.status import Status
from app.lib.exception import TmException
from app.utils.logger import logger

METHOD_CHOICES = ["source", "histogram", "em", "local"]


def exit_code_for(error: BaseException) -> int:
    """0 success, 1 validation error, 2 runtime failure."""
    if isinstance(error, TmException) and error.code.is_validation:
        return 1
    return 2


def _guarded(command):
    @functools.wraps(command)
    async def wrapper(*args, **kwargs):
        try:
            return await command(*args, **kwargs)
        except TmException as e:
            logger.error(str(e))
            sys.exit(exit_code_for(e))
        except Exception:
            logger.exception("Unexpected failure")
            sys.exit(exit_code_for(TmException(Status.UNKNOWN, "unexpected failure")))
    return wrapper


def load_run_config(config: str, method: Optional[str], seed: Optional[int], jobs: Optional[int],
                    out: Optional[str]) -> RunConfig:
    cfg = RunConfig.from_file(config)
    return cfg.with_overrides(
        method=ClusterMethod.from_cli(method) if method else None,
        seed=seed,
        jobs=jobs,
        output_dir=out,
    )


def run_options(command):
    options = [
        click.option("--config", "config", required=True, type=click.Path(), help="Flat key=value run config."),
        click.option("--method", type=click.Choice(METHOD_CHOICES), default=None, help="Clustering method."),
        click.option("--seed", type=int, default=None, help="Global seed."),
        click.option("--jobs", type=int, default=None, help="Parallel training / LP workers."),
        click.option("--out", type=click.Path(), default=None, help="Output directory."),
    ]
    for option in reversed(options):
        command = option(command)
    return command


class ExitCodeGroup(click.Group):
    """Command group whose usage errors (bad flag, bad choice) exit 1 like every other validation error."""

    async def main(self, *args, **kwargs):
        kwargs["standalone_mode"] = False
        try:
            return await super().main(*args, **kwargs)
        except click.UsageError as e:
            e.show()
            sys.exit(1)
        except click.ClickException as e:
            e.show()
            sys.exit(e.exit_code)
        except click.Abort:
            click.echo("Aborted!", err=True)
            sys.exit(2)


@click.group(cls=ExitCodeGroup, help=SERVICE_DESCRIPTION)
async def cli():
    pass


@cli.command()
@run_options
@_guarded
async def ingest(config, method, seed, jobs, out):
    """Validate the dataset and write the canonical traffic matrix CSV."""
    result = await pipeline.ingest(load_run_config(config, method, seed, jobs, out))
    summary = result["summary"]
    click.echo(f"flows={summary['flow_count']} steps={summary['steps']} "
               f"duration_seconds={summary['duration_seconds']} missing_entries={summary['missing_entries']}")


@cli.command()
@run_options
@_guarded
async def cluster(config, method, seed, jobs, out):
    """Group flows and write the cluster assignment."""
    result = await pipeline.cluster(load_run_config(config, method, seed, jobs, out))
    click.echo(f"clusters={result['summary']['cluster_count']}")


@cli.command()
@run_options
@_guarded
async def train(config, method, seed, jobs, out):
    """Train one forecaster per cluster and write test-split predictions."""
    result = await pipeline.train(load_run_config(config, method, seed, jobs, out))
    click.echo(f"models={result['summary']['model_count']}")


@cli.command()
@run_options
@_guarded
async def evaluate(config, method, seed, jobs, out):
    """Error metrics, MLU bias and plot data for the predictions."""
    result = await pipeline.evaluate(load_run_config(config, method, seed, jobs, out))
    click.echo(" ".join(f"{k}={v}" for k, v in result["summary"].items()))


@cli.command()
@click.argument("run_dirs", nargs=-1, type=click.Path())
@click.option("--config", "config", type=click.Path(), default=None, help="Run config supplying reference_table.")
@click.option("--reference", type=click.Path(), default=None, help="Reference table CSV (method,metric,value).")
@click.option("--out", type=click.Path(), default=None, help="Report directory.")
@_guarded
async def report(run_dirs, config, reference, out):
    """Aggregate evaluated runs into comparison tables."""
    if reference is None and config is not None:
        cfg = RunConfig.from_file(config)
        reference = cfg.reference_table
    await pipeline.report(list(run_dirs), out or BaseConfig.OUTPUT_DIR, reference)


@cli.command()
@click.option("--nodes", type=int, default=6, help="Node count.")
@click.option("--steps", type=int, default=2000, help="Number of intervals.")
@click.option("--regimes", type=int, default=3, help="Planted behaviour regimes (1-3).")
@click.option("--seed", type=int, default=BaseConfig.DEFAULT_SEED, help="Generator seed.")
@click.option("--interval", type=int, default=ABILENE_INTERVAL_SECONDS, help="Seconds per interval.")
@click.option("--out", type=click.Path(), default=None, help="Output directory.")
@_guarded
async def synth(nodes, steps, regimes, seed, interval, out):
    """Write a synthetic canonical dataset with planted flow regimes."""
    await pipeline.synth(out or BaseConfig.DATA_DIR, nodes, steps, regimes, seed, interval)


if __name__ == "__main__":
    asyncio.run(cli())
