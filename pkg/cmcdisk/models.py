from datetime import datetime, timezone
from typing import Optional

import sqlalchemy as sa
import sqlalchemy.orm as so


class Base(so.DeclarativeBase):
    pass


# One row per command-line invocation. The ledger only indexes runs and
# their output files; numbers are always read back from the artifacts.
class Run(Base):
    __tablename__ = 'run'

    id: so.Mapped[int] = so.mapped_column(primary_key=True)
    subcommand: so.Mapped[str] = so.mapped_column(sa.String(16), index=True)
    config_hash: so.Mapped[str] = so.mapped_column(sa.String(16), index=True)
    seed: so.Mapped[int] = so.mapped_column(default=0)
    status: so.Mapped[str] = so.mapped_column(sa.String(16), default='running')
    exit_code: so.Mapped[Optional[int]]
    out_dir: so.Mapped[str] = so.mapped_column(sa.String(512))
    # lambda so the timestamp is taken per row, not once at import time
    started_at: so.Mapped[datetime] = so.mapped_column(
        index=True, default=lambda: datetime.now(timezone.utc))
    finished_at: so.Mapped[Optional[datetime]]

    artifacts: so.WriteOnlyMapped['RunArtifact'] = so.relationship(
        back_populates='run', passive_deletes=True)

    def finish(self, exit_code):
        self.exit_code = exit_code
        self.status = 'ok' if exit_code == 0 else 'failed'
        self.finished_at = datetime.now(timezone.utc)

    def artifact_names(self, session):
        query = self.artifacts.select().order_by(RunArtifact.name)
        return [a.name for a in session.scalars(query)]

    def __repr__(self):
        return '<Run {} {} {}>'.format(self.id, self.subcommand, self.status)


class RunArtifact(Base):
    __tablename__ = 'run_artifact'

    id: so.Mapped[int] = so.mapped_column(primary_key=True)
    run_id: so.Mapped[int] = so.mapped_column(sa.ForeignKey(Run.id), index=True)
    name: so.Mapped[str] = so.mapped_column(sa.String(64))
    path: so.Mapped[str] = so.mapped_column(sa.String(512))

    run: so.Mapped[Run] = so.relationship(back_populates='artifacts')

    def __repr__(self):
        return '<RunArtifact {}>'.format(self.name)


def recent_runs(session, subcommand=None, limit=20):
    query = sa.select(Run).order_by(Run.started_at.desc()).limit(limit)
    if subcommand is not None:
        query = query.where(Run.subcommand == subcommand)
    return session.scalars(query).all()
