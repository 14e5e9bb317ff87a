"""
igct-lab Test Suite
===================

Run all fast tests:
    pytest tests/ -v

Run specific test file:
    pytest tests/test_oracle.py -v

Run specific test:
    pytest tests/test_schedule.py::TestStepPairs::test_degenerate_pair_at_t_min -v

Run the training-budget acceptance runs (minutes, CPU):
    pytest tests/ -m slow -v
"""
