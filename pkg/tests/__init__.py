# Tests for the CHG pretraining toolkit
