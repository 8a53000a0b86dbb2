import numbers
from dataclasses import dataclass
from typing import Any, Dict, List

FLOAT = 'FLOAT'
INTEGER = 'INTEGER'
STRING = 'STRING'
BASE_TYPES = (FLOAT, INTEGER, STRING)


@dataclass
class FieldSchema:
    """
    Defines the name and type specifications of a single column of an output CSV
    """
    name: str
    base_type: str = FLOAT
    nullable: bool = False

    def __post_init__(self):
        if self.base_type not in BASE_TYPES:
            raise ValueError(f'Unsupported base type "{self.base_type}" of column "{self.name}". '
                             f'Supported types are: {", ".join(BASE_TYPES)}')

    def coerce(self, value: Any) -> Any:
        """
        Converts a cell to the column's base type; None stays None in nullable columns.

        Raises:
            ValueError: on None in a non-nullable column or a value that does not fit the base type
        """
        if value is None:
            if not self.nullable:
                raise ValueError(f'Column "{self.name}" is not nullable')
            return None
        if self.base_type == INTEGER:
            if not isinstance(value, numbers.Integral):
                raise ValueError(f'Column "{self.name}" expects an integer, got {value}')
            return int(value)
        if self.base_type == FLOAT:
            return float(value)
        return str(value)


@dataclass
class TableSchema:
    """
    TableSchema class is used to define the columns of a CSV written by the experiment runner.
    """
    name: str
    fields: List[FieldSchema]

    @property
    def field_names(self) -> List[str]:
        return [column.name for column in self.fields]

    @property
    def csv_name(self) -> str:
        return f"{self.name}.csv"

    def coerce_row(self, row) -> List[Any]:
        values = list(row)
        if len(values) != len(self.fields):
            raise ValueError(f'Table "{self.name}" has {len(self.fields)} columns, got a row of {len(values)}')
        return [column.coerce(value) for column, value in zip(self.fields, values)]


def init_table_schema_from_dict(json_table_schema: Dict) -> TableSchema:
    """
    Function to initialize a Table Schema from a dictionary.
    Example of the json_table_schema structure:
    {
      "name": "history",
      "fields": [
        {"name": "cycle", "base_type": "INTEGER"},
        {"name": "gradient", "nullable": true}
      ]
    }
    """
    json_table_schema = dict(json_table_schema)
    try:
        json_table_schema["fields"] = [FieldSchema(**field) for field in json_table_schema["fields"]]
    except (TypeError, ValueError) as error:
        raise KeyError(
            f"When creating the table schema the definition of columns failed : {error}") from error
    try:
        ts = TableSchema(**json_table_schema)
    except TypeError as type_error:
        raise KeyError(
            f"When creating the table schema the definition of the table failed : {type_error}") from type_error
    return ts


_SCHEMAS = {
    # residual norm ||b - A w||_2 and gradient estimate after every cycle or iteration
    'history': {
        "name": "history",
        "fields": [
            {"name": "cycle", "base_type": INTEGER},
            {"name": "residual"},
            {"name": "gradient", "nullable": True},
        ]
    },
    'trajectory': {
        "name": "trajectory",
        "fields": [{"name": "t"}, {"name": "x"}, {"name": "y"}, {"name": "z"}]
    },
    # eta of step i is listed on node i
    'tangent': {
        "name": "tangent",
        "fields": [{"name": "t"}, {"name": "x"}, {"name": "y"}, {"name": "z"},
                   {"name": "vx"}, {"name": "vy"}, {"name": "vz"}, {"name": "eta", "nullable": True}]
    },
    'sweep': {
        "name": "sweep",
        "fields": [
            {"name": "value", "base_type": STRING},
            {"name": "gamma", "nullable": True},
            {"name": "cycles_to_tol", "base_type": INTEGER, "nullable": True},
            {"name": "flops", "nullable": True},
            {"name": "final_gradient", "nullable": True},
            {"name": "error", "base_type": STRING, "nullable": True},
        ]
    },
    'spectrum': {
        "name": "spectrum",
        "fields": [{"name": "level", "base_type": INTEGER}, {"name": "dt"}, {"name": "lambda_max"},
                   {"name": "lambda_min"}, {"name": "kappa"}]
    },
    # one cyclic reduction pass against Jacobi iteration
    'flops': {
        "name": "flops",
        "fields": [
            {"name": "m", "base_type": INTEGER},
            {"name": "levels", "base_type": INTEGER},
            {"name": "cr_flops", "base_type": INTEGER},
            {"name": "jacobi_flops", "base_type": INTEGER},
            {"name": "cr_expression", "base_type": STRING},
            {"name": "jacobi_expression", "base_type": STRING},
        ]
    },
}


def get_table_schema(name: str) -> TableSchema:
    try:
        return init_table_schema_from_dict(_SCHEMAS[name])
    except KeyError:
        raise KeyError(f"Unknown table schema '{name}'. Available schemas: {', '.join(_SCHEMAS)}")
