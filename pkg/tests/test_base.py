import logging
import unittest

from lss.shadowing import CommonInterface, ExperimentBase, ExperimentConfig
from lss.shadowing.base import experiment_action, registered_actions


class MockExperiment(ExperimentBase):
    def solve(self):
        return 'solve_executed'

    @experiment_action('mock-action')
    def mock_action(self):
        return 'action_executed'


class TestExperimentBase(unittest.TestCase):

    def setUp(self):
        self.cfg = ExperimentConfig.from_dict({})

    def tearDown(self):
        CommonInterface.set_default_logger()

    def test_default_action_is_solve(self):
        self.assertEqual(MockExperiment(self.cfg).execute_action(), 'solve_executed')

    def test_registered_action(self):
        self.assertIn('mock-action', registered_actions())
        self.assertEqual(MockExperiment(self.cfg).execute_action('mock-action'), 'action_executed')

    def test_action_from_configuration(self):
        cfg = ExperimentConfig.from_dict({'action': 'mock-action'})
        self.assertEqual(MockExperiment(cfg).execute_action(), 'action_executed')

    def test_empty_action_falls_back_to_solve(self):
        experiment = MockExperiment(ExperimentConfig.from_dict({'action': ''}))
        with self.assertLogs(level=logging.WARNING):
            self.assertEqual(experiment.execute_action(), 'solve_executed')

    def test_unknown_action_fails(self):
        with self.assertRaises(AttributeError):
            MockExperiment(self.cfg).execute_action('nonexistent')

    def test_action_without_method_fails(self):
        def orphan(self):
            return None

        experiment_action('mock-orphan')(orphan)
        with self.assertRaises(AttributeError):
            MockExperiment(self.cfg).execute_action('mock-orphan')

    def test_solve_name_is_reserved(self):
        with self.assertRaises(ValueError):
            experiment_action('solve')(lambda self: None)

    def test_debug_mode(self):
        cfg = ExperimentConfig.from_dict({'debug': True})
        MockExperiment(cfg, logging_type=CommonInterface.LOGGING_TYPE_STD)
        self.assertEqual(logging.getLogger().level, logging.DEBUG)

    def test_info_level_without_debug(self):
        MockExperiment(self.cfg, logging_type=CommonInterface.LOGGING_TYPE_STD)
        self.assertEqual(logging.getLogger().level, logging.INFO)


if __name__ == "__main__":
    unittest.main()
