import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import numpy as np
from pygelf import GelfTcpHandler, GelfUdpHandler

from .dao import ExperimentConfig, SolveReport
from .exceptions import UserException
from .table_schema import TableSchema

CSV_DIALECT = 'lss'
DEFAULT_GELF_PORT = 12201


def register_csv_dialect():
    """
    Register the CSV dialect of every table the runner writes
    """
    csv.register_dialect(CSV_DIALECT, lineterminator='\n', delimiter=',', quotechar='"')


def format_value(value: Any) -> str:
    """Floats are written round-trippable, None as an empty cell."""
    if value is None:
        return ''
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def parse_override(override: str):
    """
    Splits `dotted.key=value`; the value is parsed as JSON when possible and kept as a string otherwise.
    """
    key, sep, raw = override.partition('=')
    if not sep or not key.strip():
        raise UserException(f'Override "{override}" must have the form key=value')
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split('.'), value


def apply_overrides(config_data: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """Applies dotted-path overrides to a copy of the raw configuration."""
    data = json.loads(json.dumps(config_data))
    for override in overrides or []:
        path, value = parse_override(override)
        node = data
        for key in path[:-1]:
            child = node.setdefault(key, {})
            if not isinstance(child, dict):
                raise UserException(f'Cannot override "{override}": "{key}" is not a section')
            node = child
        node[path[-1]] = value
    return data


class CommonInterface:
    """
    Handles the tasks shared by every experiment: logging setup, configuration and the output folder.

    Attributes:
        configuration: validated experiment configuration
        out_folder_path: folder receiving every CSV and report of the run
    """
    LOGGING_TYPE_STD = 'std'
    LOGGING_TYPE_GELF = 'gelf'
    # leaves the handlers of the root logger untouched
    LOGGING_TYPE_KEEP = 'keep'

    def __init__(self, configuration: ExperimentConfig, log_level=logging.INFO, logging_type=None):
        """
        Args:
            configuration: validated configuration, see `load_configuration`
            log_level (int): logging.INFO or logging.DEBUG
            logging_type (str): optional 'std', 'gelf' or 'keep', if left empty determined by LSS_LOGGER_ADDR
                GELF transport is TCP unless LSS_LOGGER_TRANSPORT is UDP
        """
        register_csv_dialect()

        logging_type_inf = CommonInterface.LOGGING_TYPE_GELF if os.getenv('LSS_LOGGER_ADDR',
                                                                          None) else CommonInterface.LOGGING_TYPE_STD
        if not logging_type:
            logging_type = logging_type_inf

        if logging_type == CommonInterface.LOGGING_TYPE_STD:
            self.set_default_logger(log_level)
        elif logging_type == CommonInterface.LOGGING_TYPE_GELF:
            self.set_gelf_logger(log_level, transport_layer=os.getenv('LSS_LOGGER_TRANSPORT', 'TCP').upper())

        self.configuration = configuration
        self.out_folder_path = Path(configuration.output.folder)

    # ================================= Logging ==============================
    @staticmethod
    def set_default_logger(log_level: int = logging.INFO):  # noqa: E301
        """
        Sets default console logger: DEBUG and INFO to stdout, WARNING and above to stderr.

        Returns:
            Logger object
        """

        class InfoFilter(logging.Filter):
            def filter(self, rec):
                return rec.levelno in (logging.DEBUG, logging.INFO)

        hd1 = logging.StreamHandler(sys.stdout)
        hd1.addFilter(InfoFilter())
        hd2 = logging.StreamHandler(sys.stderr)
        hd2.setLevel(logging.WARNING)

        logging.getLogger().setLevel(log_level)
        # remove default handler
        for h in list(logging.getLogger().handlers):
            logging.getLogger().removeHandler(h)
        logging.getLogger().addHandler(hd1)
        logging.getLogger().addHandler(hd2)

        logger = logging.getLogger()
        return logger

    @staticmethod
    def set_gelf_logger(log_level: int = logging.INFO, transport_layer='TCP',
                        stdout=False, include_extra_fields=True, **gelf_kwargs):  # noqa: E301
        """
        Sets a GELF logger sending to LSS_LOGGER_ADDR:LSS_LOGGER_PORT.

        Args:
            log_level: logging level, default: 'logging.INFO'
            transport_layer: 'TCP' or 'UDP'
            stdout: if set to True, the console handlers are also included
            include_extra_fields: forward the `extra` dictionary of log records as GELF fields

        Returns: Logger object
        """
        for h in list(logging.getLogger().handlers):
            logging.getLogger().removeHandler(h)
        if stdout:
            CommonInterface.set_default_logger(log_level)

        gelf_kwargs['include_extra_fields'] = include_extra_fields

        host = os.getenv('LSS_LOGGER_ADDR', 'localhost')
        port = int(os.getenv('LSS_LOGGER_PORT', DEFAULT_GELF_PORT))
        if transport_layer == 'TCP':
            gelf = GelfTcpHandler(host=host, port=port, **gelf_kwargs)
        elif transport_layer == 'UDP':
            gelf = GelfUdpHandler(host=host, port=port, **gelf_kwargs)
        else:
            raise ValueError(F'Unsupported gelf transport layer: {transport_layer}. Choose TCP or UDP')

        logging.getLogger().setLevel(log_level)
        logging.getLogger().addHandler(gelf)

        logger = logging.getLogger()
        return logger

    # ================================= Configuration ==============================
    @staticmethod
    def load_configuration(config_path: Optional[str] = None, overrides: Optional[List[str]] = None,
                           seed: Optional[int] = None, out: Optional[str] = None) -> ExperimentConfig:
        """
        Reads the JSON configuration, applies overrides and validates it.

        Args:
            config_path: path to the JSON file; defaults are used when omitted
            overrides: dotted `key=value` overrides
            seed: overrides trajectory.seed
            out: overrides output.folder

        Raises:
            UserException: when the file is missing, is not JSON or fails validation
        """
        config_data = {}
        if config_path:
            try:
                with open(config_path, 'r') as config_file:
                    config_data = json.load(config_file)
            except (OSError, IOError):
                raise UserException(f'Configuration file {config_path} not found, verify that the path is correct')
            except json.JSONDecodeError as e:
                raise UserException(f'Configuration file {config_path} is not valid JSON: {e}') from e

        if not isinstance(config_data, dict):
            raise UserException(f'Configuration file {config_path} must contain a JSON object')
        extra = list(overrides or [])
        if seed is not None:
            extra.append(f'trajectory.seed={int(seed)}')
        if out is not None:
            extra.append(f'output.folder={json.dumps(out)}')
        return ExperimentConfig.from_dict(apply_overrides(config_data, extra))

    # ================================= Outputs ==============================
    def _output_path(self, file_name: str) -> Path:
        self.out_folder_path.mkdir(parents=True, exist_ok=True)
        return self.out_folder_path.joinpath(file_name)

    def write_table(self, table_schema: TableSchema, rows: Iterable[Iterable[Any]]) -> Path:
        """
        Writes rows in the column order of `table_schema`, coerced to the column types.

        Returns:
            path of the written CSV
        """
        path = self._output_path(table_schema.csv_name)
        with open(path, 'w', encoding='utf-8', newline='') as out_file:
            writer = csv.writer(out_file, dialect=CSV_DIALECT)
            writer.writerow(table_schema.field_names)
            for row in rows:
                writer.writerow([format_value(value) for value in table_schema.coerce_row(row)])
        logging.debug(f'Written {path}')
        return path

    def write_report(self, report: SolveReport, file_name: str = 'report.json') -> Path:
        """Writes the report as JSON with sorted keys."""
        path = self._output_path(file_name)
        with open(path, 'w', encoding='utf-8') as out_file:
            json.dump(report.to_dict(), out_file, sort_keys=True, indent=2, default=_json_default)
        logging.debug(f'Written {path}')
        return path


def _json_default(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f'Object of type {type(value).__name__} is not JSON serializable')
