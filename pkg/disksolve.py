import click
import sqlalchemy as sa
from cmcdisk import Session, engine
from cmcdisk.cli import cli
from cmcdisk.models import Base, Run, recent_runs


@cli.command('runs')
@click.option('--limit', type=int, default=20)
def list_runs(limit):
    """Show the most recent runs recorded in the ledger."""
    Base.metadata.create_all(engine)
    with Session() as session:
        for run in recent_runs(session, limit=limit):
            click.echo(f'{run.id:5d}  {run.subcommand:9s} {run.status:8s} '
                       f'{run.config_hash or "-":16s}  {run.out_dir}')
        click.echo(f'{session.scalar(sa.select(sa.func.count(Run.id)))} runs in total')
# Registering `runs` here rather than in cmcdisk.cli keeps ledger browsing
# apart from the numerical subcommands; it only reads the database.
# Everything goes through this file, e.g. `python disksolve.py solve --H 1 --level 4`.


if __name__ == '__main__':
    cli()
