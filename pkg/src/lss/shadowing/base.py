import logging
from abc import ABC, abstractmethod
from functools import wraps
from typing import Optional

from .dao import ExperimentConfig
from .interface import CommonInterface

# Mapping of actions "action name":"method_name"
_ACTION_MAPPING = {"solve": "solve"}


def experiment_action(action_name: str):
    """
    Decorator registering an experiment method as a named action (a CLI subcommand).

    Usage:

    ```
    class Experiment(ExperimentBase):

        def solve(self):
            ...

        @experiment_action('integrate')
        def integrate(self):
            ...
    ```

    Args:
        action_name: name of the subcommand
    """

    def decorate(func):
        if action_name == 'solve':
            raise ValueError('Action name "solve" is reserved for the default action! Use different name.')
        _ACTION_MAPPING[action_name] = func.__name__

        @wraps(func)
        def action_wrapper(self, *args, **kwargs):
            logging.debug(f'Running action {action_name}')
            return func(self, *args, **kwargs)

        return action_wrapper

    return decorate


def registered_actions():
    return sorted(_ACTION_MAPPING)


class ExperimentBase(ABC, CommonInterface):
    def __init__(self, configuration: ExperimentConfig, logging_type: Optional[str] = None):
        """
        Base class of experiments. Initializes the CommonInterface with a validated configuration.

        If `debug` is set in the configuration, the root logger is set to verbose DEBUG mode.

        Args:
            configuration: validated experiment configuration
            logging_type: 'std' or 'gelf', determined from the environment when omitted
        """
        super().__init__(configuration=configuration, logging_type=logging_type)

        if self.configuration.debug:
            self.set_debug_mode()

    @staticmethod
    def set_debug_mode():
        """
        Set the default logger to verbose mode.
        """
        logging.getLogger().setLevel(logging.DEBUG)

    @abstractmethod
    def solve(self):
        """
        Main execution code of the default action.
        """
        pass

    def execute_action(self, action: Optional[str] = None):
        """
        Executes the given action, falling back to the one defined in the configuration.
        The default action is 'solve'. See base._ACTION_MAPPING
        """
        action = action or self.configuration.action
        if not action:
            logging.warning("No action defined in the configuration, using the default solve action.")
            action = 'solve'

        try:
            method_name = _ACTION_MAPPING[action]
            action_method = getattr(self, method_name)
        except (AttributeError, KeyError) as e:
            raise AttributeError(f"The defined action {action} is not implemented!") from e
        return action_method()
