from sqlmodel import SQLModel, create_engine
from sqlalchemy.engine import Engine
from typing import Dict

# Imported for table registration on SQLModel.metadata
from ncrft.models import models  # noqa: F401

_engines: Dict[str, Engine] = {}


def get_engine(database_url: str) -> Engine:
    if database_url not in _engines:
        connect_args = {"check_same_thread": False} if database_url.startswith("sqlite") else {}
        _engines[database_url] = create_engine(database_url, echo=False, connect_args=connect_args)
    return _engines[database_url]


def create_db_and_tables(engine: Engine):
    SQLModel.metadata.create_all(engine)
