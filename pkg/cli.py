import functools
import logging
import sys

import click
import msgspec

from model import AcceptanceError, ConfigurationError, InitialDataSpec, SpacetimePoint
from conformal import (
    gaussian_test_function,
    identity_order_study,
    map_identity_report,
    pullback_forms_residual,
)
from duhamel import TopHatSource, decay_lemma_ratio, free_solution_kirchhoff, lemma_sample_points, retarded_potential
from solver_radial import RadialProbeScenario, order_of_convergence
from scenario import IDENTITY_POINT, TOPHAT_POINT, run_scenario
from report import write_report
from io_utils import encode_json

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_ACCEPTANCE = 3


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, (ConfigurationError, msgspec.ValidationError)):
        return EXIT_VALIDATION
    if isinstance(error, AcceptanceError):
        return EXIT_ACCEPTANCE
    return EXIT_RUNTIME


def lab_command(func):
    """Map laboratory exceptions to the documented exit codes."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            func(*args, **kwargs)
        except (click.exceptions.Exit, click.ClickException):
            raise
        except Exception as e:
            code = exit_code_for(e)
            if code == EXIT_RUNTIME:
                logger.error(f"{func.__name__} failed: {e}", exc_info=True)
            else:
                logger.error(f"{func.__name__}: {e}")
            click.echo(f"error: {e}", err=True)
            sys.exit(code)
        sys.exit(EXIT_OK)

    return wrapper


def _floats(raw: str):
    try:
        return [float(item) for item in raw.split(",") if item.strip()]
    except ValueError as e:
        raise click.BadParameter(f"expected comma separated numbers, got {raw!r}") from e


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Log at DEBUG level.")
def cli(verbose):
    """Conformal compactification and decay laboratory."""
    if verbose:
        logging.getLogger().setLevel(logging.DEBUG)


@cli.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="Override [output] directory.")
@lab_command
def run(config, out_dir):
    """Run the pipeline of one scenario file."""
    run_dir = run_scenario(config, out_dir)
    click.echo(str(run_dir))


@cli.command()
@click.argument("run_dirs", nargs=-1, type=click.Path(file_okay=False))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="report", show_default=True)
@lab_command
def report(run_dirs, out_dir):
    """Aggregate run directories into the acceptance report."""
    consolidated = write_report(list(run_dirs), out_dir)
    for row in consolidated.rows:
        click.echo(f"{row.number:>2} {row.name:<28} {row.verdict:<8} {row.value}")
    if consolidated.missing:
        click.echo(f"missing artifacts: {len(consolidated.missing)}", err=True)
    if not consolidated.passed:
        failed = [str(row.number) for row in consolidated.rows if row.verdict == "fail"]
        raise AcceptanceError(f"acceptance rows failed: {', '.join(failed)}")


@cli.command("verify-conformal")
@click.option("--points", default=1000, show_default=True, help="Random points for the map identities.")
@click.option("--seed", default=0, show_default=True)
@lab_command
def verify_conformal(points, seed):
    """Identity order study, map identities and pullback forms."""
    rows = identity_order_study(gaussian_test_function, IDENTITY_POINT)
    for row in rows:
        click.echo(f"h_step={row.h_step:.3e} residual={row.residual:.3e} order={row.order}")
    identities = map_identity_report(points, seed)
    click.echo(encode_json(identities).decode())
    forms = pullback_forms_residual(IDENTITY_POINT)
    click.echo(f"pullback jacobian residual={forms.jacobian:.3e} metric residual={forms.metric:.3e}")
    problems = []
    if rows[-1].order is None or rows[-1].order < 1.8:
        problems.append(f"identity order {rows[-1].order} < 1.8")
    if identities.worst > 1e-12:
        problems.append(f"map identities off by {identities.worst:.3e}")
    if problems:
        raise AcceptanceError("; ".join(problems))


@cli.command("verify-duhamel")
@click.option("--powers", default="2.5,3,4", show_default=True, help="Comma separated powers.")
@click.option("--times", default="1,2,5,10,20,50,100", show_default=True, help="Comma separated sample times.")
@click.option("--resolution", default=32, show_default=True)
@click.option("--tolerance", default=1e-3, show_default=True)
@lab_command
def verify_duhamel(powers, times, resolution, tolerance):
    """Decay lemma ratios, radial against shell quadrature, and Huygens support."""
    points = lemma_sample_points(_floats(times))
    problems = []
    for p in _floats(powers):
        coarse = decay_lemma_ratio(p, points, resolution, tolerance)
        fine = decay_lemma_ratio(p, points, 2 * resolution, tolerance)
        change = abs(fine.max_ratio - coarse.max_ratio) / fine.max_ratio
        click.echo(f"p={p:g}: max ratio {fine.max_ratio:.6g}, change {change:.3%}, unconverged {fine.unconverged}")
        if change >= 0.05 or fine.unconverged:
            problems.append(f"lemma ratio for p={p:g} not stable")

    tophat = TopHatSource()
    reduced = retarded_potential(tophat, TOPHAT_POINT, resolution, tolerance, method="radial")
    shell = retarded_potential(tophat, TOPHAT_POINT, 16, tolerance, method="shell")
    difference = abs(reduced.value - shell.value) / abs(reduced.value)
    click.echo(f"top-hat: radial {reduced.value:.8g}, shell {shell.value:.8g}, difference {difference:.3%}")
    if difference > 0.005:
        problems.append(f"top-hat quadratures differ by {difference:.3%}")

    spec = InitialDataSpec()
    chi = max(abs(free_solution_kirchhoff(spec, SpacetimePoint(t))) for t in (1.6, 2.0, 5.0, 10.0))
    click.echo(f"Huygens: max |chi(t, 0)| = {chi:.3e}")
    if chi > 1e-10:
        problems.append(f"free solution at the origin is {chi:.3e}")
    if problems:
        raise AcceptanceError("; ".join(problems))


@cli.command()
@click.option("--cells", default="200,400,800", show_default=True, help="Cell counts in ratio 1:2:4.")
@click.option("--power", default=3.0, show_default=True)
@click.option("--amplitude", default=1.0, show_default=True)
@click.option("--r-max", default=8.0, show_default=True)
@click.option("--probe-t", default=5.0, show_default=True)
@click.option("--probe-r", default=4.0, show_default=True)
@click.option("--min-order", default=1.8, show_default=True)
@lab_command
def convergence(cells, power, amplitude, r_max, probe_t, probe_r, min_order):
    """Self-convergence order of the physical radial solver at one probe point."""
    spec = InitialDataSpec(amplitude=amplitude)
    scenario = RadialProbeScenario(spec, power, r_max, probe_t, probe_r)
    result = order_of_convergence(scenario, [int(c) for c in _floats(cells)])
    click.echo(encode_json(result).decode())
    if result.status != "ok" or result.order < min_order:
        raise AcceptanceError(f"convergence order {result.order} ({result.status}) below {min_order}")


def main():
    cli()


if __name__ == "__main__":
    main()
